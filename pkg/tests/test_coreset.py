import numpy as np
import pytest

from fastref.coreset import CoresetConfig, coreset_size, select_coreset
from fastref.errors import InvalidInputError

from util import greedy_reference


class TestSizeRule:
    def test_examples(self):
        assert coreset_size(1.0, 7) == 7
        assert coreset_size(0.05, 4096) == 205
        assert coreset_size(0.001, 10) == 1  # floor of max(1, ...)
        assert coreset_size(0.5, 5) == 3  # halves round up

    def test_ratio_validation(self):
        with pytest.raises(InvalidInputError):
            CoresetConfig(ratio=0.0)
        with pytest.raises(InvalidInputError):
            CoresetConfig(ratio=1.5)


class TestGreedy:
    def test_spec_trace_0_1_10(self):
        # 1-D points {0, 1, 10}, target 2, start at index 0: the min-distance of
        # point 1 is 1 and of point 10 is 100, so 10 (index 2) is picked.
        feats = np.array([[0.0], [1.0], [10.0]], dtype=np.float32)
        cfg = CoresetConfig(ratio=2 / 3, start_rule="index_zero")
        bank, idx = select_coreset(feats, cfg)
        np.testing.assert_array_equal(idx, [0, 2])
        np.testing.assert_array_equal(bank.data.ravel(), [0.0, 10.0])

    def test_target_one_is_start_point(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((20, 3)).astype(np.float32)
        _, idx = select_coreset(feats, CoresetConfig(ratio=0.01, start_rule="index_zero"))
        np.testing.assert_array_equal(idx, [0])

    def test_ratio_one_selects_everything(self):
        rng = np.random.default_rng(1)
        feats = rng.standard_normal((15, 4)).astype(np.float32)
        bank, idx = select_coreset(feats, CoresetConfig(ratio=1.0, seed=3))
        assert sorted(idx.tolist()) == list(range(15))
        assert bank.count == 15
        np.testing.assert_array_equal(bank.data, feats[idx].astype(np.float32))

    def test_no_duplicates_and_size(self):
        rng = np.random.default_rng(2)
        feats = rng.standard_normal((101, 8)).astype(np.float32)
        for ratio in (0.1, 0.33, 0.8):
            _, idx = select_coreset(feats, CoresetConfig(ratio=ratio, seed=7))
            assert len(idx) == coreset_size(ratio, 101)
            assert len(set(idx.tolist())) == len(idx)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((64, 6)).astype(np.float32)
        cfg = CoresetConfig(ratio=0.25, seed=42)
        _, a = select_coreset(feats, cfg)
        _, b = select_coreset(feats, cfg)
        np.testing.assert_array_equal(a, b)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            select_coreset(np.zeros((0, 3), dtype=np.float32), CoresetConfig(ratio=0.5))

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_independent_reference(self, seed):
        rng = np.random.default_rng(seed)
        rows = int(rng.integers(5, 120))
        feats = rng.standard_normal((rows, int(rng.integers(1, 9)))).astype(np.float32)
        ratio = float(rng.uniform(0.05, 0.9))
        cfg = CoresetConfig(ratio=ratio, seed=seed)
        _, idx = select_coreset(feats, cfg)
        start = int(np.random.default_rng(seed).integers(0, rows))
        ref = greedy_reference(feats.astype(np.float64), coreset_size(ratio, rows), start)
        assert idx.tolist() == ref

    def test_duplicate_points_tie_break_low_index(self):
        feats = np.array([[0.0], [5.0], [5.0], [0.0]], dtype=np.float32)
        _, idx = select_coreset(feats, CoresetConfig(ratio=1.0, start_rule="index_zero"))
        # after {0, 1}: both remaining have min-dist 0, lowest index 2 first
        np.testing.assert_array_equal(idx, [0, 1, 2, 3])

    def test_cosine_mode_normalizes_bank(self):
        rng = np.random.default_rng(4)
        feats = (rng.standard_normal((30, 5)) * 7.0).astype(np.float32)
        bank, _ = select_coreset(feats, CoresetConfig(ratio=0.3, seed=0), metric_mode="cosine")
        norms = np.linalg.norm(bank.data.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_cosine_selection_is_scale_invariant(self):
        rng = np.random.default_rng(5)
        feats = rng.standard_normal((40, 4))
        scales = rng.uniform(0.5, 20.0, size=(40, 1))
        cfg = CoresetConfig(ratio=0.25, seed=9)
        _, idx_a = select_coreset(feats, cfg, metric_mode="cosine")
        _, idx_b = select_coreset(feats * scales, cfg, metric_mode="cosine")
        assert idx_a.tolist() == idx_b.tolist()
