"""Evaluation utilities: exact AUROC, the synthetic planted-outlier generator,
and the wall-time benchmark for the refine+score path.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError
from .ot import SinkhornConfig
from .refine import BankGram, RefineConfig, StageTimer, refine_and_score
from .tensor_io import EUCLIDEAN


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel().astype(np.int64)
        if s.shape != y.shape:
            raise InvalidInputError("scores and labels must have equal length")
        if s.size == 0:
            raise InvalidInputError("scores must be non-empty")
        if not np.all(np.isfinite(s)):
            raise InvalidInputError("scores contain NaN or Inf")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("labels must be 0 or 1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)


def auroc(data: LabeledScores) -> float:
    """Exact AUROC via the rank statistic: the probability that a random
    positive outscores a random negative, ties counted 1/2."""
    y = data.labels
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes, got {n_pos} positive / {n_neg} negative"
        )
    order = np.argsort(data.scores, kind="stable")
    sorted_scores = data.scores[order]
    ranks = np.empty(y.size, dtype=np.float64)
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average 1-based rank for the tie block [i, j]
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = float(ranks[y == 1].sum()) - 0.5 * n_pos * (n_pos + 1)
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class SynthInstance:
    bank: np.ndarray  # n x c float32
    query: np.ndarray  # m x c float32
    outlier_indices: np.ndarray  # sorted positions of the planted rows


def synth_generate(
    seed: int,
    m: int = 64,
    n: int = 64,
    c: int = 16,
    outliers: int = 4,
    shift: float = 6.0,
) -> SynthInstance:
    """Deterministic planted-outlier instance: bank rows drawn N(0, I_c), query
    rows the same law with ``outliers`` rows shifted by ``shift`` along the
    first axis.  The outlier positions are seed-chosen and returned."""
    if outliers >= m:
        raise InvalidInputError("outlier count must be < m")
    if min(m, n, c) <= 0:
        raise InvalidInputError("dims must be positive")
    rng = np.random.default_rng(seed)
    bank = rng.standard_normal((n, c))
    query = rng.standard_normal((m, c))
    idx = np.sort(rng.choice(m, size=outliers, replace=False)) if outliers else np.empty(0, np.int64)
    query[idx, 0] += shift
    return SynthInstance(
        bank.astype(np.float32), query.astype(np.float32), idx.astype(np.int64)
    )


@dataclass(frozen=True)
class BenchReport:
    """Median/p95 wall time per pipeline stage, in milliseconds."""

    m: int
    n: int
    c: int
    outer_iters: int
    inner_iters: int
    repeats: int
    threads: int
    stages: dict[str, dict[str, float]]
    total_median_ms: float
    total_p95_ms: float

    def to_dict(self) -> dict:
        return {
            "dims": {"m": self.m, "n": self.n, "c": self.c},
            "outer_iters": self.outer_iters,
            "inner_iters": self.inner_iters,
            "repeats": self.repeats,
            "threads": self.threads,
            "stages_ms": self.stages,
            "total_median_ms": self.total_median_ms,
            "total_p95_ms": self.total_p95_ms,
        }


def _p95(values: list[float]) -> float:
    ordered = sorted(values)
    pos = 0.95 * (len(ordered) - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    return ordered[lo] * (1.0 - frac) + ordered[hi] * frac


def bench_refine(
    m: int = 1024,
    n: int = 102,
    c: int = 640,
    outer_iters: int = 2,
    inner_iters: int = 10,
    repeats: int = 10,
    seed: int = 0,
    threads: int = 1,
    lam: float | None = None,
) -> BenchReport:
    """Time refine+score on random instances of the given dims.

    One warm-up round runs first and is excluded from the statistics.  The
    per-bank Gram inverse is precomputed outside the timed region, matching
    how the pipeline amortizes it across a test set.  BLAS threading is pinned
    to ``threads`` while the benchmark runs so timings are stable.
    """
    if repeats < 10:
        raise InvalidInputError("repeats must be >= 10")
    rng = np.random.default_rng(seed)
    bank = rng.standard_normal((n, c)).astype(np.float32)
    config = RefineConfig(
        lam=lam,
        outer_iters=outer_iters,
        sinkhorn=SinkhornConfig(epsilon=None, max_inner_iters=inner_iters),
        metric_mode=EUCLIDEAN,
    )
    gram = BankGram(np.asarray(bank, dtype=np.float64), config.ridge)
    queries = [
        rng.standard_normal((m, c)).astype(np.float32) for _ in range(repeats + 1)
    ]

    def run_all() -> tuple[list[dict[str, float]], list[float]]:
        per_stage: list[dict[str, float]] = []
        totals: list[float] = []
        for rep, query in enumerate(queries):
            timer = StageTimer()
            t0 = time.perf_counter()
            refine_and_score(query, bank, config, gram=gram, timer=timer)
            elapsed = time.perf_counter() - t0
            if rep == 0:
                continue  # warm-up
            per_stage.append(dict(timer.seconds))
            totals.append(elapsed)
        return per_stage, totals

    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        per_stage, totals = run_all()
    else:
        with threadpool_limits(limits=threads):
            per_stage, totals = run_all()

    stage_names = ("init", "sinkhorn", "w_update", "scoring")
    stages = {}
    for name in stage_names:
        vals = [1e3 * rec.get(name, 0.0) for rec in per_stage]
        stages[name] = {
            "median_ms": statistics.median(vals),
            "p95_ms": _p95(vals),
        }
    totals_ms = [1e3 * t for t in totals]
    return BenchReport(
        m=m,
        n=n,
        c=c,
        outer_iters=outer_iters,
        inner_iters=inner_iters,
        repeats=repeats,
        threads=threads,
        stages=stages,
        total_median_ms=statistics.median(totals_ms),
        total_p95_ms=_p95(totals_ms),
    )
