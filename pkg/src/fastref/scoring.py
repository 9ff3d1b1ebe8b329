"""Anomaly score maps and image-level scores from refined prototypes.

A patch's score is its distance to the nearest refined prototype (squared
Euclidean, or (1 - cos)/2 in cosine mode).  The image score is the maximum of
the patch map before any resampling; upsampling and Gaussian smoothing only
shape the pixel-level output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NonFiniteError
from .tensor_io import COSINE, EUCLIDEAN, FlatFeatures

DEFAULT_SIGMA = 4.0


@dataclass(frozen=True)
class ScoreMap:
    """h x w grid of nonnegative anomaly scores (float64 in memory)."""

    height: int
    width: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.height, self.width) <= 0:
            raise InvalidInputError("ScoreMap dims must be positive")
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.shape != (self.height, self.width):
            raise InvalidInputError(
                f"ScoreMap: expected shape {(self.height, self.width)}, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("ScoreMap contains NaN or Inf")
        if np.any(arr < 0.0):
            raise InvalidInputError("ScoreMap entries must be nonnegative")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "ScoreMap":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise InvalidInputError("ScoreMap.from_array wants a 2-D array")
        return cls(arr.shape[0], arr.shape[1], arr)


def score_map(
    query,
    refined,
    metric_mode: str = EUCLIDEAN,
    grid: tuple[int, int] | None = None,
) -> ScoreMap:
    """Min distance from each query row to the refined prototype rows,
    reshaped row-major to the h x w patch grid (default 1 x m)."""
    q = query.data if isinstance(query, FlatFeatures) else np.asarray(query)
    r = refined.data if isinstance(refined, FlatFeatures) else np.asarray(refined)
    q = np.ascontiguousarray(q, dtype=np.float64)
    r = np.ascontiguousarray(r, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or min(q.shape) == 0 or min(r.shape) == 0:
        raise InvalidInputError("score_map wants non-empty 2-D query and refined matrices")
    if q.shape[1] != r.shape[1]:
        raise InvalidInputError(f"channel mismatch: {q.shape[1]} vs {r.shape[1]}")
    if grid is None:
        grid = (1, q.shape[0])
    if grid[0] * grid[1] != q.shape[0]:
        raise InvalidInputError(f"grid {grid} does not cover {q.shape[0]} query rows")
    if metric_mode == EUCLIDEAN:
        d = (
            np.sum(q * q, axis=1)[:, None]
            + np.sum(r * r, axis=1)[None, :]
            - 2.0 * (q @ r.T)
        )
        np.maximum(d, 0.0, out=d)
        scores = d.min(axis=1)
    elif metric_mode == COSINE:
        qn = np.linalg.norm(q, axis=1)
        rn = np.linalg.norm(r, axis=1)
        if np.any(qn == 0.0) or np.any(rn == 0.0):
            raise InvalidInputError("cosine score undefined for zero rows")
        cos = np.clip((q / qn[:, None]) @ (r / rn[:, None]).T, -1.0, 1.0)
        scores = (0.5 * (1.0 - cos)).min(axis=1)
    else:
        raise InvalidInputError(f"unknown metric_mode {metric_mode!r}")
    return ScoreMap(grid[0], grid[1], scores.reshape(grid))


def image_score(smap: ScoreMap) -> float:
    """Maximum entry of the (pre-upsampling) score map."""
    if smap.data.size == 0:
        raise InvalidInputError("image_score of an empty map")
    return float(smap.data.max())


def upsample_bilinear(smap: ScoreMap, target_hw: tuple[int, int]) -> ScoreMap:
    """Corner-aligned bilinear upsampling to H x W (H >= h, W >= w).

    Output pixel (I, J) samples the source at (I*(h-1)/(H-1), J*(w-1)/(W-1));
    a singleton source axis broadcasts its only sample.
    """
    bigh, bigw = int(target_hw[0]), int(target_hw[1])
    if bigh <= 0 or bigw <= 0:
        raise InvalidInputError("upsample target dims must be positive")
    h, w = smap.height, smap.width
    if bigh < h or bigw < w:
        raise InvalidInputError(
            f"upsample_bilinear only enlarges: {h}x{w} -> {bigh}x{bigw}"
        )

    def axis_coords(src: int, dst: int) -> np.ndarray:
        if dst == 1 or src == 1:
            return np.zeros(dst)
        return np.arange(dst) * (src - 1) / (dst - 1)

    ys = axis_coords(h, bigh)
    xs = axis_coords(w, bigw)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    src = smap.data
    top = src[np.ix_(y0, x0)] * (1.0 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1.0 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1.0 - fy) + bot * fy
    np.maximum(out, 0.0, out=out)
    return ScoreMap(bigh, bigw, out)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete Gaussian, truncated at radius ceil(3*sigma), normalized to sum 1."""
    if not sigma > 0.0:
        raise InvalidInputError("sigma must be positive")
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(smap: ScoreMap, sigma: float) -> ScoreMap:
    """Separable Gaussian convolution with symmetric (half-sample reflect)
    border padding; preserves constants exactly up to rounding."""
    k = gaussian_kernel(sigma)
    radius = (len(k) - 1) // 2

    def conv_rows(arr: np.ndarray) -> np.ndarray:
        padded = np.pad(arr, ((radius, radius), (0, 0)), mode="symmetric")
        out = np.zeros_like(arr)
        for off, weight in enumerate(k):
            out += weight * padded[off : off + arr.shape[0], :]
        return out

    out = conv_rows(smap.data)
    out = conv_rows(out.T).T
    np.maximum(out, 0.0, out=out)
    return ScoreMap(smap.height, smap.width, out)


def combine_zero_shot(s_zero: float, smap: ScoreMap) -> float:
    """Average an external zero-shot score in [0, 1] with the map maximum:
    s* = (s0 + max_j s_j) / 2.  Map entries are expected in [0, 1] (cosine
    mode guarantees this)."""
    if not (0.0 <= s_zero <= 1.0):
        raise InvalidInputError(f"s_zero must lie in [0, 1], got {s_zero}")
    return 0.5 * (s_zero + image_score(smap))
