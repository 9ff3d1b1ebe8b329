"""Nested prototype refinement: closed-form transform updates alternating with
entropic-OT anomaly suppression, plus the Gaussian mean-alignment baseline.

Given query features F (m x c) and a prototype bank M (n x c), the refiner
seeks a transform W (m x n) whose refined prototypes W M reconstruct F while
the transport plan T pulls the refined rows back toward the bank's
distribution:

    minimize_{W, T}  ||F - W M||_F^2  +  lam * ( <T, C(W M, M)> + eps * sum T log T )

T is constrained to uniform marginals (rows 1/m, columns 1/n).  With T fixed
the W subproblem is quadratic per row and solved exactly:

    W = (F M^T + lam * T M M^T) (M M^T + ridge)^-1,  row i then divided by
    (1 + lam * sum_j T_ij)

With W fixed, T is the entropic OT plan between the refined rows and the bank.
Alternating the two steps can only lower the objective (the W step is an exact
minimizer; the T step is optimal up to the Sinkhorn stopping error), which the
per-iteration trace records as evidence.

Cosine mode unit-normalizes the query and bank rows and then runs the same
closed form: on the unit sphere ||x - y||^2 = 2 (1 - cos(x, y)), so the
squared-Euclidean surrogate is proportional to the cosine objective and the
minimizing W coincides.  The trace always logs the squared-Euclidean surrogate
(on the normalized features in cosine mode), which is the quantity with the
descent guarantee.

All internal arithmetic is float64; inputs may be float32 tensors.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NonConvergenceError, SingularMatrixError
from .ot import (
    COSINE_DIST,
    SQ_EUCLIDEAN,
    CostMatrix,
    SinkhornConfig,
    TransportPlan,
    _entropy_sum,
    _sinkhorn_core,
    auto_epsilon,
    cost_matrix,
)
from .tensor_io import COSINE, EUCLIDEAN, METRIC_MODES, FlatFeatures, PrototypeBank


def default_lambda(metric_mode: str) -> float:
    """Balance coefficient defaults: 0.3 in Euclidean mode, 0.1 in cosine mode."""
    return 0.3 if metric_mode == EUCLIDEAN else 0.1


@dataclass(frozen=True)
class TransformMatrix:
    """m x n transform mapping prototypes to refined prototypes W M.

    Held in float64: the closed-form updates are exact stationary points and
    rounding them away would show up in every gradient check downstream.
    """

    rows: int
    cols: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.shape != (self.rows, self.cols):
            raise InvalidInputError(
                f"TransformMatrix: expected shape {(self.rows, self.cols)}, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("TransformMatrix contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "TransformMatrix":
        arr = np.asarray(arr)
        return cls(arr.shape[0], arr.shape[1], arr)


@dataclass(frozen=True)
class RefineConfig:
    """Knobs for the nested refinement; lam=None picks the per-metric default."""

    lam: float | None = None
    outer_iters: int = 2
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    ridge: float = 1e-6
    metric_mode: str = EUCLIDEAN

    def __post_init__(self):
        if self.metric_mode not in METRIC_MODES:
            raise InvalidInputError(f"unknown metric_mode {self.metric_mode!r}")
        if self.lam is None:
            object.__setattr__(self, "lam", default_lambda(self.metric_mode))
        if self.lam < 0.0:
            raise InvalidInputError("lam must be nonnegative")
        if self.outer_iters < 1:
            raise InvalidInputError("outer_iters must be >= 1")
        if self.ridge < 0.0:
            raise InvalidInputError("ridge must be nonnegative")


@dataclass(frozen=True)
class RefineStep:
    objective: float
    recon_term: float
    ot_term: float
    step_norm: float


@dataclass(frozen=True)
class RefineTrace:
    """Per-outer-iteration evidence; entry l holds the objective at
    (W_{l+1}, T_{l+1}) and ||W_{l+1} - W_l||_F.  ``initial_objective`` is the
    value at (W_0, T_1), i.e. before the first transform update."""

    initial_objective: float
    epsilon: float
    steps: tuple[RefineStep, ...]

    def objectives(self) -> list[float]:
        return [self.initial_objective] + [s.objective for s in self.steps]


@dataclass(frozen=True)
class RefineResult:
    refined: np.ndarray  # m x c float32, W* applied to the bank
    w: TransformMatrix
    plan: TransportPlan
    trace: RefineTrace | None


class StageTimer:
    """Accumulates wall time per pipeline stage (init / sinkhorn / w_update / scoring)."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + (time.perf_counter() - t0)


@contextmanager
def _null_stage(name: str):
    yield


class _NullTimer:
    stage = staticmethod(_null_stage)


class BankGram:
    """Shared, read-only per-bank precomputation: the ridged Gram matrix
    M M^T + ridge * (tr(M M^T)/n) * I and its explicit inverse.

    Safe to share across threads; nothing here mutates after construction.
    """

    def __init__(self, bank: np.ndarray, ridge: float = 1e-6):
        m = np.ascontiguousarray(bank, dtype=np.float64)
        if m.ndim != 2 or min(m.shape) == 0:
            raise InvalidInputError("bank must be a non-empty n x c matrix")
        if ridge < 0.0:
            raise InvalidInputError("ridge must be nonnegative")
        n = m.shape[0]
        gram = m @ m.T
        gram = 0.5 * (gram + gram.T)
        trace = float(np.trace(gram))
        rho = ridge * trace / n
        gr = gram + rho * np.eye(n)
        try:
            chol = np.linalg.cholesky(gr)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(
                f"Gram matrix is singular (ridge={ridge}); prototypes are linearly dependent"
            ) from exc
        ident = np.eye(n)
        low = np.linalg.solve(chol, ident)
        ginv = low.T @ low  # (L L^T)^-1 = L^-T L^-1
        self.bank = m
        self.gram = gram
        self.gram_diag = np.ascontiguousarray(np.diag(gram))
        self.trace = trace
        self.ridge = ridge
        self.rho = rho
        self.ginv = 0.5 * (ginv + ginv.T)

    @property
    def count(self) -> int:
        return self.bank.shape[0]

    @property
    def channels(self) -> int:
        return self.bank.shape[1]


def _as_matrix(x, what: str) -> np.ndarray:
    if isinstance(x, FlatFeatures):
        x = x.data
    elif isinstance(x, PrototypeBank):
        x = x.data
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) == 0:
        raise InvalidInputError(f"{what} must be a non-empty 2-D matrix")
    return arr


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise InvalidInputError(f"{what}: cosine mode cannot normalize a zero row")
    return x / norms


def _resolve_gram(bank: np.ndarray, ridge: float, gram: BankGram | None) -> BankGram:
    if gram is None:
        return BankGram(bank, ridge)
    if gram.bank.shape != bank.shape:
        raise InvalidInputError("precomputed BankGram does not match this bank's shape")
    return gram


def init_transform(
    query,
    bank,
    ridge: float = 1e-6,
    *,
    gram: BankGram | None = None,
) -> TransformMatrix:
    """Ridge-stabilized least-squares transform:
    W0 = (F M^T) (M M^T + ridge * (tr/n) I)^-1."""
    f = _as_matrix(query, "query")
    m = _as_matrix(bank, "bank")
    if f.shape[1] != m.shape[1]:
        raise InvalidInputError(f"channel mismatch: query {f.shape[1]} vs bank {m.shape[1]}")
    bg = _resolve_gram(m, ridge, gram)
    w = (f @ m.T) @ bg.ginv
    return TransformMatrix.from_array(w)


def update_transform(
    query,
    bank,
    plan: TransportPlan,
    lam: float,
    ridge: float = 1e-6,
    *,
    gram: BankGram | None = None,
) -> TransformMatrix:
    """Exact minimizer of the W subproblem with the transport plan held fixed:
    W = (F M^T + lam * T M M^T) (M M^T + ridge)^-1, row i divided by
    (1 + lam * sum_j T_ij)."""
    f = _as_matrix(query, "query")
    m = _as_matrix(bank, "bank")
    if f.shape[1] != m.shape[1]:
        raise InvalidInputError(f"channel mismatch: query {f.shape[1]} vs bank {m.shape[1]}")
    if lam < 0.0:
        raise InvalidInputError("lam must be nonnegative")
    t = plan.data
    if t.shape != (f.shape[0], m.shape[0]):
        raise InvalidInputError(
            f"plan shape {t.shape} does not match (query rows, bank rows) "
            f"{(f.shape[0], m.shape[0])}"
        )
    bg = _resolve_gram(m, ridge, gram)
    rhs = f @ m.T + lam * (t @ bg.gram)
    w = (rhs @ bg.ginv) / (1.0 + lam * t.sum(axis=1))[:, None]
    return TransformMatrix.from_array(w)


def objective_value(
    query,
    bank,
    w,
    plan: TransportPlan,
    lam: float,
    epsilon: float,
    metric_mode: str = EUCLIDEAN,
) -> tuple[float, float, float]:
    """Evaluate (total, recon_term, ot_term) of the nested objective at (W, T).

    Euclidean mode: recon = ||F - W M||_F^2 with squared-Euclidean transport
    costs; cosine mode: recon = sum_i (1 - cos(F_i, (W M)_i)) / 2 with cosine
    transport costs.  ot_term = <T, C> + epsilon * sum T log T.
    """
    f = _as_matrix(query, "query")
    m = _as_matrix(bank, "bank")
    warr = np.asarray(w.data if isinstance(w, TransformMatrix) else w, dtype=np.float64)
    if warr.shape != (f.shape[0], m.shape[0]):
        raise InvalidInputError("transform shape does not match (query rows, bank rows)")
    if plan.data.shape != warr.shape:
        raise InvalidInputError("plan shape does not match the transform shape")
    wm = warr @ m
    if metric_mode == EUCLIDEAN:
        recon = float(np.sum((f - wm) ** 2))
        c = cost_matrix(wm, m, SQ_EUCLIDEAN)
    elif metric_mode == COSINE:
        fn = np.linalg.norm(f, axis=1)
        wn = np.linalg.norm(wm, axis=1)
        if np.any(fn == 0.0) or np.any(wn == 0.0):
            raise InvalidInputError("cosine objective undefined for zero rows")
        cos = np.sum(f * wm, axis=1) / (fn * wn)
        recon = float(np.sum(0.5 * (1.0 - np.clip(cos, -1.0, 1.0))))
        c = cost_matrix(wm, m, COSINE_DIST)
    else:
        raise InvalidInputError(f"unknown metric_mode {metric_mode!r}")
    ot_term = float(np.sum(plan.data * c.data)) + epsilon * _entropy_sum(plan.data)
    return recon + lam * ot_term, recon, ot_term


class _RefineState:
    """One query's refinement, built around the cached products that make the
    closed form cheap: FMt = F M^T is computed once, and W G is recovered from
    the update's own right-hand side (W G = (RHS - rho * RHS Ginv) / denom)
    instead of a fresh multiplication."""

    def __init__(self, f: np.ndarray, bg: BankGram, timer):
        self.f = f
        self.bg = bg
        with timer.stage("init"):
            self.fmt = f @ bg.bank.T  # m x n, reused by every update and by scoring
            self.fsq = np.einsum("ij,ij->i", f, f)
            wpre = self.fmt @ bg.ginv
            self.w = wpre
            self.v = self.fmt - bg.rho * wpre  # V = W G, exactly

    def cost(self) -> CostMatrix:
        h = np.einsum("ij,ij->i", self.v, self.w)  # ||(W M)_i||^2 via diag(W G W^T)
        c = self.v * -2.0
        c += h[:, None]
        c += self.bg.gram_diag[None, :]
        np.maximum(c, 0.0, out=c)
        return CostMatrix(c, SQ_EUCLIDEAN)

    def update(self, plan: np.ndarray, lam: float) -> float:
        """Closed-form W step; returns ||W_new - W_old||_F."""
        rhs = plan @ self.bg.gram
        rhs *= lam
        rhs += self.fmt
        wpre = rhs @ self.bg.ginv
        denom = (1.0 + lam * plan.sum(axis=1))[:, None]
        rhs -= self.bg.rho * wpre
        rhs /= denom
        v_new = rhs  # (RHS - rho * RHS Ginv) / denom == W_new G, exactly
        wpre /= denom
        w_new = wpre
        step = float(np.linalg.norm(w_new - self.w))
        self.w = w_new
        self.v = v_new
        return step

    def recon(self) -> float:
        # ||F - W M||_F^2 = ||F||^2 - 2 <FMt, W> + <V, W>
        return float(np.sum(self.fsq) - 2.0 * np.vdot(self.fmt, self.w) + np.vdot(self.v, self.w))

    def refined_norms_sq(self) -> np.ndarray:
        return np.maximum(np.einsum("ij,ij->i", self.v, self.w), 0.0)

    def neg2_cross_with_query(self) -> np.ndarray:
        """-2 F (W M)^T as (-2 FMt) W^T -- the m x m score cross-term, with the
        -2 folded into the cheap m x n side."""
        return (-2.0 * self.fmt) @ self.w.T


def _prepare_inputs(query, bank, metric_mode: str) -> tuple[np.ndarray, np.ndarray]:
    f = _as_matrix(query, "query")
    m = _as_matrix(bank, "bank")
    if f.shape[1] != m.shape[1]:
        raise InvalidInputError(f"channel mismatch: query {f.shape[1]} vs bank {m.shape[1]}")
    if metric_mode == COSINE:
        f = _unit_rows(f, "query")
        m = _unit_rows(m, "bank")
    return f, m


def _run_refine(
    f: np.ndarray,
    bg: BankGram,
    config: RefineConfig,
    timer,
    with_trace: bool,
):
    state = _RefineState(f, bg, timer)
    lam = config.lam
    eps = config.sinkhorn.epsilon
    initial_objective = None
    steps: list[RefineStep] = []
    plan = residuals = iters = history = None
    with timer.stage("sinkhorn"):
        c = state.cost()
        if eps is None:
            eps = auto_epsilon(c)  # resolved once so the traced objective is fixed
    for outer in range(config.outer_iters):
        with timer.stage("sinkhorn"):
            plan, row_res, col_res, iters, history = _sinkhorn_core(
                c.data, eps, config.sinkhorn.max_inner_iters, config.sinkhorn.marginal_tol
            )
            residuals = (row_res, col_res)
        if with_trace and initial_objective is None:
            ot_val = float(np.einsum("ij,ij->", plan, c.data)) + eps * _entropy_sum(plan)
            initial_objective = state.recon() + lam * ot_val
        with timer.stage("w_update"):
            step = state.update(plan, lam)
        last = outer == config.outer_iters - 1
        if with_trace or not last:
            with timer.stage("sinkhorn"):
                c = state.cost()  # cost at the new W, reused by the next solve
        if with_trace:
            recon = state.recon()
            ot_term = float(np.einsum("ij,ij->", plan, c.data)) + eps * _entropy_sum(plan)
            steps.append(RefineStep(recon + lam * ot_term, recon, ot_term, step))
    trace = (
        RefineTrace(initial_objective, eps, tuple(steps)) if with_trace else None
    )
    final_plan = TransportPlan(
        np.maximum(plan, np.finfo(np.float64).tiny),
        residuals[0],
        residuals[1],
        iters,
        tuple(history),
    )
    return state, final_plan, trace


def fastref_refine(query, bank, config: RefineConfig | None = None) -> RefineResult:
    """Alternate transport-plan and transform updates for ``config.outer_iters``
    rounds and return the refined bank W* M with the full trace.

    The traced objective is non-increasing whenever the inner Sinkhorn solves
    run near convergence (the transform step is an exact minimizer; the plan
    step is optimal up to the solver's stopping error).  At harshly limited
    inner budgets with small epsilon the recorded plans can sit far enough
    from feasibility that successive trace entries wobble at the inner
    suboptimality scale; raise ``max_inner_iters`` or ``marginal_tol`` when
    the trace itself is the point.

    Pure per query; concurrent calls may share one read-only :class:`BankGram`
    via :func:`refine_and_score` or by precomputing it and calling the update
    ops directly.
    """
    config = config or RefineConfig()
    if isinstance(bank, PrototypeBank) and bank.metric_mode != config.metric_mode:
        raise InvalidInputError(
            f"bank metric_mode {bank.metric_mode!r} != config {config.metric_mode!r}"
        )
    f, m = _prepare_inputs(query, bank, config.metric_mode)
    bg = BankGram(m, config.ridge)
    state, plan, trace = _run_refine(f, bg, config, _NullTimer(), with_trace=True)
    refined = (state.w @ bg.bank).astype(np.float32)
    return RefineResult(refined, TransformMatrix.from_array(state.w), plan, trace)


@dataclass(frozen=True)
class ScoredQuery:
    """Pipeline output for one query image."""

    patch_scores: np.ndarray  # h x w float64, pre-upsampling
    image_score: float
    w: TransformMatrix | None = None
    plan: TransportPlan | None = None
    trace: RefineTrace | None = None


def refine_and_score(
    query,
    bank,
    config: RefineConfig | None = None,
    *,
    grid: tuple[int, int] | None = None,
    gram: BankGram | None = None,
    timer: StageTimer | None = None,
    with_trace: bool = False,
    keep_transform: bool = False,
) -> ScoredQuery:
    """Refine one query against the bank and score every patch against the
    refined prototypes, reusing the refinement's cached products.

    Scores are min-distances per Euclidean (squared) or cosine ((1-cos)/2)
    mode.  ``grid`` reshapes the m patch scores to h x w (default 1 x m).
    ``gram`` shares the per-bank precomputation across queries and threads; in
    cosine mode a shared gram must be built from unit-normalized bank rows.
    """
    config = config or RefineConfig()
    if isinstance(bank, PrototypeBank) and bank.metric_mode != config.metric_mode:
        raise InvalidInputError(
            f"bank metric_mode {bank.metric_mode!r} != config {config.metric_mode!r}"
        )
    f, m = _prepare_inputs(query, bank, config.metric_mode)
    if grid is None:
        grid = (1, f.shape[0])
    if grid[0] * grid[1] != f.shape[0]:
        raise InvalidInputError(
            f"grid {grid} does not cover {f.shape[0]} query rows"
        )
    if gram is None:
        gram = BankGram(m, config.ridge)
    tm = timer if timer is not None else _NullTimer()
    state, plan, trace = _run_refine(f, gram, config, tm, with_trace=with_trace)
    with tm.stage("scoring"):
        d = state.neg2_cross_with_query()
        h = state.refined_norms_sq()
        if config.metric_mode == EUCLIDEAN:
            # min_j ||f_i - (WM)_j||^2 = fsq_i + min_j (h_j - 2 cross_ij)
            d += h[None, :]
            scores = d.min(axis=1)
            scores += state.fsq
            np.maximum(scores, 0.0, out=scores)
        else:
            # query rows are unit here; min distance = (1 - max_j cos_ij) / 2
            norms = np.sqrt(np.maximum(h, np.finfo(np.float64).tiny))
            d /= -2.0 * norms[None, :]
            np.clip(d, -1.0, 1.0, out=d)
            scores = 0.5 * (1.0 - d.max(axis=1))
        patch = scores.reshape(grid)
        image_score = float(scores.max())
    return ScoredQuery(
        patch_scores=patch,
        image_score=image_score,
        w=TransformMatrix.from_array(state.w) if keep_transform else None,
        plan=plan if keep_transform else None,
        trace=trace,
    )


def ttt_refine(
    query,
    bank,
    lam: float,
    ridge: float = 1e-6,
    fp_iters: int = 100,
    fp_tol: float = 1e-8,
    *,
    gram: BankGram | None = None,
) -> tuple[np.ndarray, TransformMatrix]:
    """Gaussian mean-alignment baseline: replace the OT regularizer with
    lam * ||mean(M) - mean(W M)||^2 and solve the per-row stationarity system

        W_i = [F_i + (lam/m) mu - (lam/m^2) sum_{r != i} (W M)_r] M^T G^-1
              / (1 + lam/m^2)

    by damped fixed-point iteration from the least-squares W0.  The rows couple
    only through the running mean of W M; the undamped map has eigenvalues in
    [-rho, +sigma] with rho = lam (m-1)/(m^2+lam) and sigma = lam/(m^2+lam),
    so the step is relaxed by theta = 2 / (2 + rho - sigma), which centers the
    damped spectrum and keeps its radius (rho+sigma)/(2+rho-sigma) < 1 for
    every lam >= 0 (theta = 1, i.e. no damping, when lam = 0).  Convergence
    still slows as lam grows; NonConvergenceError (carrying the final
    residual) is raised if fp_iters passes without reaching fp_tol.
    """
    f = _as_matrix(query, "query")
    m = _as_matrix(bank, "bank")
    if f.shape[1] != m.shape[1]:
        raise InvalidInputError(f"channel mismatch: query {f.shape[1]} vs bank {m.shape[1]}")
    if lam < 0.0:
        raise InvalidInputError("lam must be nonnegative")
    if fp_iters < 1:
        raise InvalidInputError("fp_iters must be >= 1")
    bg = _resolve_gram(m, ridge, gram)
    rows = f.shape[0]
    mu = m.mean(axis=0)
    mt_ginv = m.T @ bg.ginv  # c x n, fixed across iterations
    denom = 1.0 + lam / rows**2
    rho_mode = lam * (rows - 1) / (rows**2 + lam)
    sigma_mode = lam / (rows**2 + lam)
    theta = 2.0 / (2.0 + rho_mode - sigma_mode)
    w = f @ mt_ginv  # least-squares start
    residual = np.inf
    for _ in range(fp_iters):
        v = w @ m
        colsum = v.sum(axis=0)
        a = f + (lam / rows) * mu[None, :] - (lam / rows**2) * (colsum[None, :] - v)
        w_new = (1.0 - theta) * w + theta * (a @ mt_ginv) / denom
        residual = float(np.linalg.norm(w_new - w))
        w = w_new
        if residual <= fp_tol:
            break
    else:
        raise NonConvergenceError(
            f"fixed point residual {residual:.3e} > {fp_tol:.3e} after {fp_iters} iterations",
            residual,
        )
    refined = (w @ m).astype(np.float32)
    return refined, TransformMatrix.from_array(w)
