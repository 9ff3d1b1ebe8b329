"""Greedy farthest-first (k-center) subsampling of support features.

The prototype bank keeps ``max(1, round(ratio * rows))`` rows of the support
features.  Selection is the exact greedy rule: start from a seed point, then
repeatedly add the point whose minimum squared Euclidean distance to the
already-selected set is largest, breaking ties toward the lowest index.  In
cosine mode rows are unit-normalized before selection, which leaves the
greedy choices identical to ranking by cosine distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .tensor_io import COSINE, EUCLIDEAN, METRIC_MODES, FlatFeatures, PrototypeBank

SEEDED_RANDOM = "seeded_random"
INDEX_ZERO = "index_zero"
START_RULES = (SEEDED_RANDOM, INDEX_ZERO)


@dataclass(frozen=True)
class CoresetConfig:
    ratio: float
    seed: int = 0
    start_rule: str = SEEDED_RANDOM

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise InvalidInputError(f"coreset ratio must lie in (0, 1], got {self.ratio}")
        if self.start_rule not in START_RULES:
            raise InvalidInputError(f"unknown start_rule {self.start_rule!r}")
        if self.seed < 0:
            raise InvalidInputError("seed must be a nonnegative integer")


def coreset_size(ratio: float, rows: int) -> int:
    """Target bank size: max(1, round(ratio * rows)), halves rounding up."""
    return max(1, int(np.floor(ratio * rows + 0.5)))


def select_coreset(
    features: FlatFeatures | np.ndarray,
    config: CoresetConfig,
    metric_mode: str = EUCLIDEAN,
) -> tuple[PrototypeBank, np.ndarray]:
    """Pick the prototype rows; returns the bank and the selected indices in
    selection order.

    Deterministic given (features, config).  The returned bank rows are exact
    copies of the selected feature rows (unit-normalized first in cosine mode).
    """
    if metric_mode not in METRIC_MODES:
        raise InvalidInputError(f"unknown metric_mode {metric_mode!r}")
    raw = features.data if isinstance(features, FlatFeatures) else np.asarray(features)
    if raw.ndim != 2 or raw.shape[0] == 0 or raw.shape[1] == 0:
        raise InvalidInputError("select_coreset needs a non-empty rows x channels matrix")

    pts = raw.astype(np.float64, copy=False)
    if metric_mode == COSINE:
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise InvalidInputError("cosine mode cannot normalize a zero feature row")
        pts = pts / norms

    rows = pts.shape[0]
    target = coreset_size(config.ratio, rows)
    if config.start_rule == INDEX_ZERO:
        start = 0
    else:
        start = int(np.random.default_rng(config.seed).integers(0, rows))

    selected = np.empty(target, dtype=np.int64)
    selected[0] = start
    # min squared distance from every point to the selected set so far
    min_d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    min_d2[start] = -np.inf
    for t in range(1, target):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        selected[t] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -np.inf

    bank_rows = pts[selected].astype(np.float32)
    bank = PrototypeBank(target, pts.shape[1], bank_rows, metric_mode)
    return bank, selected
