import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from fastref.tensor_io import read_tensor


def run_cli(*args, check=True, cwd=None):
    proc = subprocess.run(
        [sys.executable, "-m", "fastref.cli", *map(str, args)],
        capture_output=True,
        text=True,
        cwd=cwd,
    )
    if check and proc.returncode != 0:
        raise AssertionError(f"cli failed ({proc.returncode}): {proc.stderr}")
    return proc


def make_dataset(root: Path, seed=0, anomalous=6, normal=6, outliers=4):
    run_cli(
        "synth", "--out", root, "--seed", seed,
        "--support", 1, "--num-normal", normal, "--num-anomalous", anomalous,
        "--grid", 8, 8, "--channels", 16, "--outliers", outliers, "--shift", 6.0,
    )
    return root / "support.jsonl", root / "query.jsonl"


def full_pipeline(root: Path, lam=None, sigma=0.5, extra=()):
    """Run synth -> build-prototypes -> score -> eval entirely under ``root``
    with fixed relative paths, so runs in different roots are byte-comparable."""
    root.mkdir(parents=True, exist_ok=True)
    run_cli("synth", "--out", "data", "--seed", 0, "--support", 1,
            "--num-normal", 6, "--num-anomalous", 6, "--grid", 8, 8,
            "--channels", 16, "--outliers", 4, "--shift", 6.0, cwd=root)
    run_cli("build-prototypes", "data/support.jsonl", "--out", "bank.ftz",
            "--ratio", 1.0, cwd=root)
    score_args = ["score", "bank.ftz", "data/query.jsonl", "--out", "scored",
                  "--sigma", sigma]
    if lam is not None:
        score_args += ["--lambda", lam]
    score_args += list(extra)
    run_cli(*score_args, cwd=root)
    run_cli("eval", "scored/scores.json", "data/query.jsonl",
            "--out", "report.json", cwd=root)
    return json.loads((root / "report.json").read_text())


class TestPipeline:
    def test_end_to_end_aurocs(self, tmp_path):
        report = full_pipeline(tmp_path / "run")
        assert report["num_images"] == 12
        assert report["image_auroc"] > 0.9
        assert report["pixel_auroc"] > 0.9

    def test_lambda_zero_not_better(self, tmp_path):
        base = full_pipeline(tmp_path / "r1")
        zero = full_pipeline(tmp_path / "r2", lam=0.0)
        assert base["image_auroc"] >= zero["image_auroc"]

    def test_deterministic_outputs(self, tmp_path):
        r1 = full_pipeline(tmp_path / "r1")
        r2 = full_pipeline(tmp_path / "r2")
        assert r1 == r2
        # byte-identical tensors and JSON
        a, b = tmp_path / "r1", tmp_path / "r2"
        assert (a / "scored" / "scores.json").read_bytes() == (b / "scored" / "scores.json").read_bytes()
        maps_a = sorted((a / "scored" / "maps").iterdir())
        maps_b = sorted((b / "scored" / "maps").iterdir())
        assert [p.name for p in maps_a] == [p.name for p in maps_b]
        for pa, pb in zip(maps_a, maps_b):
            assert pa.read_bytes() == pb.read_bytes()
        assert (a / "bank.ftz").read_bytes() == (b / "bank.ftz").read_bytes()
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()

    def test_threads_do_not_change_results(self, tmp_path):
        full_pipeline(tmp_path / "r1")
        full_pipeline(tmp_path / "r2", extra=("--threads", "3"))
        a = json.loads((tmp_path / "r1" / "scored" / "scores.json").read_text())
        b = json.loads((tmp_path / "r2" / "scored" / "scores.json").read_text())
        assert [i["score"] for i in a["images"]] == [i["score"] for i in b["images"]]

    def test_outlier_free_set_reports_undefined_metric(self, tmp_path):
        root = tmp_path / "data"
        run_cli("synth", "--out", root, "--seed", 0, "--support", 1,
                "--num-normal", 5, "--num-anomalous", 0)
        bank = tmp_path / "bank.ftz"
        run_cli("build-prototypes", root / "support.jsonl", "--out", bank, "--ratio", 1.0)
        run_cli("score", bank, root / "query.jsonl", "--out", tmp_path / "scored",
                "--sigma", 0.5)
        proc = run_cli("eval", tmp_path / "scored" / "scores.json", root / "query.jsonl",
                       check=False)
        assert proc.returncode == 3
        err = json.loads(proc.stderr.strip().splitlines()[-1])
        assert err["error"] == "UndefinedMetricError"

    def test_upsampled_maps_match_image_hw(self, tmp_path):
        root = tmp_path / "data"
        run_cli("synth", "--out", root, "--seed", 1, "--support", 1,
                "--num-normal", 2, "--num-anomalous", 2, "--upscale", 4)
        bank = tmp_path / "bank.ftz"
        run_cli("build-prototypes", root / "support.jsonl", "--out", bank, "--ratio", 1.0)
        run_cli("score", bank, root / "query.jsonl", "--out", tmp_path / "scored",
                "--sigma", 2.0)
        payload = json.loads((tmp_path / "scored" / "scores.json").read_text())
        smap = read_tensor(tmp_path / "scored" / payload["images"][0]["map"])
        assert (smap.rows, smap.channels) == (32, 32)
        report = run_cli("eval", tmp_path / "scored" / "scores.json", root / "query.jsonl")
        assert json.loads(report.stdout)["pixel_auroc"] > 0.8


class TestZeroShotCombination:
    def test_cosine_mode_averages_external_score(self, tmp_path):
        root = tmp_path / "data"
        support, query = make_dataset(root, seed=6)
        # attach synthetic zero-shot scores to every query record
        lines = []
        for i, line in enumerate((root / "query.jsonl").read_text().splitlines()):
            rec = json.loads(line)
            rec["s0"] = round(0.1 + 0.05 * i, 3)
            lines.append(json.dumps(rec, sort_keys=True))
        (root / "query.jsonl").write_text("\n".join(lines) + "\n")
        bank = tmp_path / "bank.ftz"
        run_cli("build-prototypes", support, "--out", bank, "--ratio", 1.0,
                "--metric", "cosine")
        run_cli("score", bank, root / "query.jsonl", "--out", tmp_path / "scored",
                "--metric", "cosine", "--sigma", 0.5)
        payload = json.loads((tmp_path / "scored" / "scores.json").read_text())
        for rec in payload["images"]:
            assert rec["score"] == 0.5 * (rec["s0"] + rec["max_patch_score"])
            assert 0.0 <= rec["max_patch_score"] <= 1.0  # cosine maps stay in [0, 1]

    def test_euclidean_mode_ignores_s0(self, tmp_path):
        root = tmp_path / "data"
        support, query = make_dataset(root, seed=7)
        lines = []
        for line in (root / "query.jsonl").read_text().splitlines():
            rec = json.loads(line)
            rec["s0"] = 0.5
            lines.append(json.dumps(rec, sort_keys=True))
        (root / "query.jsonl").write_text("\n".join(lines) + "\n")
        bank = tmp_path / "bank.ftz"
        run_cli("build-prototypes", support, "--out", bank, "--ratio", 1.0)
        run_cli("score", bank, root / "query.jsonl", "--out", tmp_path / "scored",
                "--sigma", 0.5)
        payload = json.loads((tmp_path / "scored" / "scores.json").read_text())
        for rec in payload["images"]:
            assert rec["score"] == rec["max_patch_score"]


class TestBaselines:
    def test_baseline_subcommand_defaults_to_lstsq(self, tmp_path):
        root = tmp_path / "data"
        support, query = make_dataset(root, seed=2)
        bank = tmp_path / "bank.ftz"
        run_cli("build-prototypes", support, "--out", bank, "--ratio", 1.0)
        run_cli("baseline", bank, query, "--out", tmp_path / "b")
        payload = json.loads((tmp_path / "b" / "scores.json").read_text())
        assert payload["config"]["baseline"] == "lstsq"
        # equivalent to score --lambda 0
        run_cli("score", bank, query, "--out", tmp_path / "s", "--lambda", 0.0)
        lam0 = json.loads((tmp_path / "s" / "scores.json").read_text())
        a = [i["score"] for i in payload["images"]]
        b = [i["score"] for i in lam0["images"]]
        np.testing.assert_allclose(a, b, rtol=1e-9)

    def test_ttt_baseline_runs(self, tmp_path):
        root = tmp_path / "data"
        support, query = make_dataset(root, seed=3)
        bank = tmp_path / "bank.ftz"
        run_cli("build-prototypes", support, "--out", bank, "--ratio", 1.0)
        run_cli("baseline", bank, query, "--out", tmp_path / "t", "--baseline", "ttt")
        report = run_cli("eval", tmp_path / "t" / "scores.json", query)
        assert json.loads(report.stdout)["image_auroc"] is not None


class TestErrors:
    def test_unknown_flag_exits_2(self):
        proc = run_cli("score", "--definitely-not-a-flag", check=False)
        assert proc.returncode == 2

    def test_missing_file_exits_3(self, tmp_path):
        proc = run_cli("build-prototypes", tmp_path / "nope.jsonl",
                       "--out", tmp_path / "bank.ftz", check=False)
        assert proc.returncode == 3
        err = json.loads(proc.stderr.strip().splitlines()[-1])
        assert "error" in err and "detail" in err

    def test_channel_mismatch_exits_3(self, tmp_path):
        root = tmp_path / "data"
        support, query = make_dataset(root, seed=4)
        bank = tmp_path / "bank.ftz"
        run_cli("build-prototypes", support, "--out", bank, "--ratio", 1.0)
        other = tmp_path / "other"
        run_cli("synth", "--out", other, "--seed", 5, "--support", 1,
                "--num-normal", 1, "--num-anomalous", 0, "--channels", 8)
        proc = run_cli("score", bank, other / "query.jsonl",
                       "--out", tmp_path / "x", check=False)
        assert proc.returncode == 3

    def test_bad_epsilon_usage_error(self):
        proc = run_cli("score", "a", "b", "--out", "c", "--epsilon", "zero", check=False)
        assert proc.returncode == 2


class TestDefaults:
    def test_flag_defaults_match_stated_settings(self):
        from fastref.cli import build_parser

        parser = build_parser()
        score = parser.parse_args(["score", "b", "m", "--out", "o"])
        assert score.outer_iters == 2
        assert score.sinkhorn_iters == 10
        assert score.lam is None  # resolved per metric: 0.3 euclidean / 0.1 cosine
        assert score.metric == "euclidean"
        assert score.epsilon is None  # auto
        assert score.ridge == 1e-6
        assert score.sigma == 4.0
        build = parser.parse_args(["build-prototypes", "m", "--out", "o"])
        assert build.ratio == 0.05
        from fastref.refine import default_lambda

        assert default_lambda("euclidean") == 0.3
        assert default_lambda("cosine") == 0.1


class TestBenchCommand:
    def test_bench_emits_report(self, tmp_path):
        out = tmp_path / "bench.json"
        run_cli("bench", "--m", 64, "--n", 16, "--c", 24, "--repeats", 10,
                "--out", out)
        report = json.loads(out.read_text())
        assert report["dims"] == {"m": 64, "n": 16, "c": 24}
        assert report["total_median_ms"] > 0
