"""Entropy-regularized optimal transport between refined and original prototypes.

The solver minimizes  <T, C> + eps * sum T log T  over the transportation
polytope with uniform marginals (rows sum to 1/m, columns to 1/n) by the
classic alternating row/column scaling of K = exp(-C/eps).  Scalings are
tracked as log-domain potentials with kernel re-materialization (absorption)
whenever the normal-domain scalings drift toward overflow/underflow, plus an
exact log-sum-exp step as a rescue path; this keeps iterations at matrix-vector
cost while behaving like a pure log-domain implementation for small eps.

``exact_ot_small`` solves the unregularized problem exactly on instances up
to 4x4 by enumerating the vertices of the transportation polytope (basic
feasible solutions, i.e. spanning trees of the bipartite support graph).  It
exists as an independent oracle for the Sinkhorn solver and stays that way:
it shares no code with the iterative path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    DegenerateKernelError,
    InvalidInputError,
    NonFiniteError,
    UnsupportedSizeError,
)

SQ_EUCLIDEAN = "sq_euclidean"
COSINE_DIST = "cosine_dist"
COST_MODES = (SQ_EUCLIDEAN, COSINE_DIST)

# |log u| threshold that triggers absorbing normal-domain scalings into the
# log-domain potentials (safely inside the f64 exponent range).
_ABSORB_LOG = 300.0


@dataclass(frozen=True)
class CostMatrix:
    """Nonnegative finite m x n transport costs."""

    data: np.ndarray = field(repr=False)
    metric_mode: str = SQ_EUCLIDEAN

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or min(arr.shape) == 0:
            raise InvalidInputError("cost matrix must be a non-empty 2-D array")
        if self.metric_mode not in COST_MODES:
            raise InvalidInputError(f"unknown cost metric_mode {self.metric_mode!r}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("cost matrix contains NaN or Inf")
        if np.any(arr < 0.0):
            raise InvalidInputError("cost matrix entries must be nonnegative")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SinkhornConfig:
    """epsilon=None asks for the auto rule (0.05 x median cost) per call."""

    epsilon: float | None = None
    max_inner_iters: int = 10
    marginal_tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0.0:
            raise InvalidInputError("epsilon must be positive")
        if self.max_inner_iters < 1:
            raise InvalidInputError("max_inner_iters must be >= 1")
        if not self.marginal_tol > 0.0:
            raise InvalidInputError("marginal_tol must be positive")


@dataclass(frozen=True)
class TransportPlan:
    """Strictly positive m x n plan with uniform target marginals 1/m and 1/n.

    ``row_residual``/``col_residual`` are the achieved L-infinity marginal
    errors; a budget-limited solve may stop short of any given tolerance, so
    conformance is checked where a contract needs it via
    :meth:`check_marginals`.  ``l1_history`` records the (row, col) L1
    residuals after every full row+column sweep.
    """

    data: np.ndarray = field(repr=False)
    row_residual: float = 0.0
    col_residual: float = 0.0
    iterations: int = 0
    l1_history: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or min(arr.shape) == 0:
            raise InvalidInputError("transport plan must be a non-empty 2-D array")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("transport plan contains NaN or Inf")
        if np.any(arr <= 0.0):
            raise InvalidInputError("transport plan entries must be strictly positive")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def row_marginal(self) -> float:
        return 1.0 / self.rows

    @property
    def col_marginal(self) -> float:
        return 1.0 / self.cols

    def check_marginals(self, tol: float = 1e-6) -> None:
        if max(self.row_residual, self.col_residual) > tol:
            raise InvalidInputError(
                f"plan marginals off by (row {self.row_residual:.3e}, "
                f"col {self.col_residual:.3e}), tolerance {tol:.3e}"
            )


def cost_matrix(a, b, mode: str = SQ_EUCLIDEAN) -> CostMatrix:
    """Pairwise costs between the rows of ``a`` (m x c) and ``b`` (n x c).

    sq_euclidean: C_ij = ||a_i - b_j||^2; cosine_dist: C_ij = (1 - cos(a_i, b_j)) / 2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInputError("cost_matrix wants two 2-D arrays")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(
            f"channel mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    if mode == SQ_EUCLIDEAN:
        aa = np.sum(a * a, axis=1)[:, None]
        bb = np.sum(b * b, axis=1)[None, :]
        c = aa + bb - 2.0 * (a @ b.T)
        np.maximum(c, 0.0, out=c)  # clamp the cancellation noise at d(x,x)
    elif mode == COSINE_DIST:
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if np.any(na == 0.0) or np.any(nb == 0.0):
            raise InvalidInputError("cosine_dist undefined for zero rows")
        cos = (a / na[:, None]) @ (b / nb[:, None]).T
        np.clip(cos, -1.0, 1.0, out=cos)
        c = 0.5 * (1.0 - cos)
    else:
        raise InvalidInputError(f"unknown cost metric_mode {mode!r}")
    return CostMatrix(c, mode)


def auto_epsilon(cost: CostMatrix | np.ndarray) -> float:
    """Default regularization: 0.05 x median cost, with mean then 1e-3 fallbacks
    when the median (or mean) vanishes."""
    data = cost.data if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    eps = 0.05 * float(np.median(data))
    if eps <= 0.0:
        eps = 0.05 * float(np.mean(data))
    if eps <= 0.0 or not np.isfinite(eps):
        eps = 1e-3
    return eps


def _entropy_sum(plan: np.ndarray) -> float:
    """sum T log T with the 0 log 0 = 0 convention."""
    if np.all(plan > 0.0):
        return float(np.einsum("ij,ij->", plan, np.log(plan)))
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(plan > 0.0, np.log(np.where(plan > 0.0, plan, 1.0)), 0.0)
    return float(np.sum(plan * logs))


class _LogScaledKernel:
    """K~ = exp((f (+) g - C) / eps) with f, g the log-domain potentials."""

    def __init__(self, logk: np.ndarray, eps: float):
        self.logk = logk  # -C / eps
        self.eps = eps
        m, n = logk.shape
        self.f = np.zeros(m)
        self.g = np.zeros(n)
        self.kt: np.ndarray | None = None

    def exact_pair_update(self, log_p: float, log_q: float) -> None:
        """One full row+column potential update via log-sum-exp (always finite)."""
        for axis, marg in ((1, log_p), (0, log_q)):
            z = self.logk + self.f[:, None] / self.eps + self.g[None, :] / self.eps
            mx = np.max(z, axis=axis)
            if not np.all(np.isfinite(mx)):
                raise DegenerateKernelError(
                    "kernel exp(-C/eps) has an empty row or column even in log domain"
                )
            lse = mx + np.log(np.sum(np.exp(z - np.expand_dims(mx, axis)), axis=axis))
            if axis == 1:
                self.f += self.eps * (marg - lse)
            else:
                self.g += self.eps * (marg - lse)
        if not (np.all(np.isfinite(self.f)) and np.all(np.isfinite(self.g))):
            raise DegenerateKernelError("Sinkhorn potentials diverged to non-finite values")
        self.kt = None

    def materialize(self) -> np.ndarray:
        if self.kt is None:
            z = self.logk + self.f[:, None] / self.eps + self.g[None, :] / self.eps
            self.kt = np.exp(z)
        return self.kt

    def absorb(self, u: np.ndarray, v: np.ndarray) -> None:
        with np.errstate(divide="ignore"):
            self.f += self.eps * np.log(u)
            self.g += self.eps * np.log(v)
        if not (np.all(np.isfinite(self.f)) and np.all(np.isfinite(self.g))):
            raise DegenerateKernelError("Sinkhorn potentials diverged to non-finite values")
        self.kt = None


def _sinkhorn_core(cost: np.ndarray, eps: float, max_iters: int, tol: float):
    m, n = cost.shape
    p, q = 1.0 / m, 1.0 / n
    with np.errstate(over="ignore", divide="ignore"):
        kernel = _LogScaledKernel(-cost / eps, eps)

    # If exp(-C/eps) would lose a whole row or column to underflow, start from
    # one exact log-domain update so the re-based kernel is representable.
    if (np.max(kernel.logk, axis=1).min() < -680.0) or (
        np.max(kernel.logk, axis=0).min() < -680.0
    ):
        kernel.exact_pair_update(np.log(p), np.log(q))

    u = np.ones(m)
    v = np.ones(n)
    kt = kernel.materialize()
    kv = kt @ v
    row_res = col_res = np.inf
    history: list[tuple[float, float]] = []
    it = 0
    while it < max_iters:
        it += 1
        if np.any(kv <= 0.0) or not np.all(np.isfinite(kv)):
            kernel.absorb(u, v)
            kernel.exact_pair_update(np.log(p), np.log(q))
            u = np.ones(m)
            v = np.ones(n)
            kt = kernel.materialize()
            kv = kt @ v
            if np.any(kv <= 0.0) or not np.all(np.isfinite(kv)):
                raise DegenerateKernelError(
                    "kernel exp(-C/eps) underflowed an entire row or column"
                )
        u = p / kv
        ktu = kt.T @ u
        if np.any(ktu <= 0.0) or not np.all(np.isfinite(ktu)):
            kernel.absorb(u, v)
            u = np.ones(m)
            v = np.ones(n)
            kt = kernel.materialize()
            kv = kt @ v
            continue
        v = q / ktu
        kv = kt @ v  # reused by the next sweep's row update
        row_err = u * kv - p
        col_err = v * ktu - q  # ktu is stale only by the v rescale, which is exact
        row_res = float(np.max(np.abs(row_err)))
        col_res = float(np.max(np.abs(col_err)))
        history.append((float(np.sum(np.abs(row_err))), float(np.sum(np.abs(col_err)))))
        if row_res <= tol and col_res <= tol:
            break
        lu = np.max(np.abs(np.log(u)))
        lv = np.max(np.abs(np.log(v)))
        if max(lu, lv) > _ABSORB_LOG:
            kernel.absorb(u, v)
            u = np.ones(m)
            v = np.ones(n)
            kt = kernel.materialize()
            kv = kt @ v

    plan = (u[:, None] * kt) * v[None, :]
    if not np.all(np.isfinite(plan)) or np.any(np.sum(plan, axis=1) <= 0.0) or np.any(
        np.sum(plan, axis=0) <= 0.0
    ):
        raise DegenerateKernelError("Sinkhorn plan degenerated (zero row/column or NaN)")
    return plan, row_res, col_res, it, history


def sinkhorn(cost: CostMatrix, config: SinkhornConfig) -> tuple[TransportPlan, float]:
    """Entropic OT with uniform marginals; returns the plan and the regularized
    objective value <T, C> + eps * sum T log T."""
    eps = config.epsilon if config.epsilon is not None else auto_epsilon(cost)
    plan, row_res, col_res, iters, history = _sinkhorn_core(
        cost.data, eps, config.max_inner_iters, config.marginal_tol
    )
    # Strictly positive entropic plans can still underflow to 0.0 in f64 at
    # harsh eps; nudge those entries to the smallest positive normal so the
    # type invariant holds without changing any marginal at this precision.
    tiny = np.finfo(np.float64).tiny
    if np.any(plan == 0.0):
        plan = np.maximum(plan, tiny)
    value = float(np.einsum("ij,ij->", plan, cost.data)) + eps * _entropy_sum(plan)
    return (
        TransportPlan(plan, row_res, col_res, iters, tuple(history)),
        value,
    )


@lru_cache(maxsize=None)
def _polytope_vertices(m: int, n: int) -> np.ndarray:
    """All vertices of {T >= 0 : T 1 = 1/m, T^T 1 = 1/n}, shape (k, m, n).

    Vertices are basic feasible solutions whose support is a spanning forest;
    enumerating every spanning tree of the complete bipartite graph and
    solving each by leaf elimination covers all of them.  Supplies are scaled
    by m*n so the elimination runs in exact integers.
    """
    edges = [(i, j) for i in range(m) for j in range(n)]
    nodes = m + n
    verts: set[tuple[int, ...]] = set()
    for combo in itertools.combinations(range(len(edges)), nodes - 1):
        # union-find acyclicity + spanning check
        parent = list(range(nodes))

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        ok = True
        for ei in combo:
            i, j = edges[ei]
            ri, rj = find(i), find(m + j)
            if ri == rj:
                ok = False
                break
            parent[ri] = rj
        if not ok:
            continue
        # solve the tree by repeated leaf elimination, integer supplies:
        # row nodes carry n units, column nodes carry m units (total m*n each side)
        supply = [n] * m + [m] * n
        adj: dict[int, list[tuple[int, int]]] = {k: [] for k in range(nodes)}
        for ei in combo:
            i, j = edges[ei]
            adj[i].append((m + j, ei))
            adj[m + j].append((i, ei))
        values = {}
        degree = {k: len(adj[k]) for k in range(nodes)}
        leaves = [k for k in range(nodes) if degree[k] == 1]
        removed = [False] * len(edges)
        feasible = True
        while leaves:
            leaf = leaves.pop()
            live = [(other, ei) for other, ei in adj[leaf] if not removed[ei]]
            if not live:
                continue
            other, ei = live[0]
            flow = supply[leaf]
            if flow < 0:
                feasible = False
                break
            values[ei] = flow
            supply[leaf] = 0
            supply[other] -= flow
            removed[ei] = True
            degree[leaf] -= 1
            degree[other] -= 1
            if degree[other] == 1:
                leaves.append(other)
        if not feasible or any(val < 0 for val in values.values()):
            continue
        t = np.zeros((m, n), dtype=np.int64)
        for ei, val in values.items():
            i, j = edges[ei]
            t[i, j] = val
        verts.add(tuple(t.ravel().tolist()))
    stacked = np.array(sorted(verts), dtype=np.float64).reshape(-1, m, n)
    return stacked / float(m * n)


def exact_ot_small(cost: CostMatrix) -> tuple[np.ndarray, float]:
    """Exact unregularized OT with uniform marginals for m, n <= 4.

    Enumerates the basic feasible solutions of the transportation polytope and
    returns a minimizing plan with its cost.
    """
    m, n = cost.rows, cost.cols
    if m > 4 or n > 4:
        raise UnsupportedSizeError(f"exact_ot_small supports up to 4x4, got {m}x{n}")
    verts = _polytope_vertices(m, n)
    scores = verts.reshape(len(verts), -1) @ cost.data.ravel()
    best = int(np.argmin(scores))
    return verts[best].copy(), float(scores[best])
