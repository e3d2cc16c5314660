"""Implicit-feedback ALS.

Observations are confidence-weighted binary preferences: p_uv = 1 where
r_uv > 0 and 0 everywhere else, with confidence c_uv = 1 + alpha * r_uv.
The loss is dense (every cell contributes), so each row system is built
with the precomputed-Gram decomposition

    A_u = F^T F + sum_{r_uv > 0} alpha * r_uv * theta_v theta_v^T + lambda * I
    b_u = sum_{r_uv > 0} (1 + alpha * r_uv) * theta_v

which keeps the per-side cost at O(N_z f^2 + f^3) despite the dense loss.
F^T F is computed once per half-update and shared read-only by all row
solves. Regularization here is plain lambda * I (not the weighted form
used by the explicit engine).

Every row is updated each half-update: a row with no observations still
has the dense zero-preference term, and its optimum is the zero vector.
"""

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import SparseRatings, Triples
from .errors import DataError
from .factors import init_factors, predict_pairs
from .gram import TileConfig, assemble_side, pack_lower, roofline_estimate
from .report import EpochRecord, PhaseTimes, TrainReport
from .solvers import SolverConfig, batch_solve

_OBJ_CHUNK = 1 << 18


@dataclass
class ImplicitConfig:
    f: int = 100
    alpha: float = 40.0
    lam: float = 0.05
    epochs: int = 10
    solver: SolverConfig = field(default_factory=SolverConfig)
    init_scale: float = 0.1
    seed: int = 0
    tiles: TileConfig = field(default_factory=TileConfig)

    def __post_init__(self):
        if self.f < 1:
            raise DataError("f must be >= 1")
        if self.alpha <= 0:
            raise DataError("alpha must be > 0")
        if self.lam < 0:
            raise DataError("lambda must be >= 0")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")


def precompute_gram(factors: np.ndarray) -> np.ndarray:
    """Packed lower triangle of F^T F, FP32 accumulation."""
    f32 = np.ascontiguousarray(factors, dtype=np.float32)
    return pack_lower(f32.T @ f32)


def implicit_update_side(view, fixed: np.ndarray, gram_packed: np.ndarray,
                         target: np.ndarray, alpha: float, lam: float,
                         solver: SolverConfig, tiles: TileConfig | None = None):
    """One implicit half-update; writes all target rows in place.

    Returns (PhaseTimes, gram_bytes, cg_breakdowns).
    """
    if target.shape[0] != view.nrows or fixed.shape[1] != target.shape[1]:
        raise DataError("factor matrices do not match the ratings view")
    if view.values.shape[0] and float(view.values.min()) < 0:
        raise DataError("implicit feedback requires non-negative ratings")
    a_weights = (alpha * view.values).astype(np.float32)
    b_weights = (1.0 + alpha * view.values).astype(np.float32)
    batch, times = assemble_side(view, fixed, lam, cfg=tiles,
                                 precision=solver.precision, weighted_reg=False,
                                 a_weights=a_weights, b_weights=b_weights,
                                 base_packed=gram_packed)
    t0 = time.perf_counter()
    result = batch_solve(batch, target, solver)
    target[:] = result.x
    times.solve += time.perf_counter() - t0
    return times, batch.a_nbytes, result.breakdowns


def implicit_objective(x: np.ndarray, theta: np.ndarray, ratings: SparseRatings,
                       alpha: float, lam: float) -> float:
    """Dense weighted objective sum_{u,v} c_uv (p_uv - x_u.theta_v)^2 plus
    plain-lambda regularization, evaluated in float64 via the Gram trick."""
    x64 = x.astype(np.float64)
    t64 = theta.astype(np.float64)
    gram = t64.T @ t64
    total = float(np.einsum("uf,fg,ug->", x64, gram, x64))  # sum over all cells of pred^2
    users = np.repeat(np.arange(ratings.m, dtype=np.int64), np.diff(ratings.row_ptr))
    for lo in range(0, ratings.nnz, _OBJ_CHUNK):
        hi = min(lo + _OBJ_CHUNK, ratings.nnz)
        pred = np.einsum("ij,ij->i",
                         x64[users[lo:hi]], t64[ratings.col_idx[lo:hi]])
        c = 1.0 + alpha * ratings.csr_val[lo:hi].astype(np.float64)
        # replace the 1 * (0 - pred)^2 term counted above with c * (1 - pred)^2
        total += float((c * (1.0 - pred) ** 2 - pred ** 2).sum())
    reg = float((x64 ** 2).sum() + (t64 ** 2).sum())
    return total + lam * reg


def preference_rmse(x: np.ndarray, theta: np.ndarray, positives: Triples) -> float:
    """RMSE of predictions against the constant preference 1 on positives."""
    if len(positives) == 0:
        raise DataError("cannot evaluate on an empty set of positives")
    pred = predict_pairs(x, theta, positives.user, positives.item).astype(np.float64)
    return float(np.sqrt(np.mean((1.0 - pred) ** 2)))


def mean_percentile_rank(x: np.ndarray, theta: np.ndarray, positives: Triples) -> float:
    """Mean percentile rank of held-out positives (0 = ranked first,
    0.5 = random). Ties share the average rank."""
    if len(positives) == 0:
        raise DataError("cannot evaluate on an empty set of positives")
    n = theta.shape[0]
    if n < 2:
        raise DataError("need at least two items to rank")
    total = 0.0
    for u in np.unique(positives.user):
        scores = x[u] @ theta.T
        sel = positives.item[positives.user == u]
        for v in sel:
            greater = float((scores > scores[v]).sum())
            equal = float((scores == scores[v]).sum()) - 1.0
            total += (greater + 0.5 * equal) / (n - 1)
    return total / len(positives)


def implicit_train(train_ratings: SparseRatings, cfg: ImplicitConfig,
                   test: Triples | None = None):
    """Alternating updates on the implicit objective.

    Returns (X, Theta, TrainReport); the report's objective column is the
    dense weighted objective, and rmse (when a test set of positives is
    supplied) is the preference RMSE against 1.
    """
    if train_ratings.nnz and float(train_ratings.csr_val.min()) < 0:
        raise DataError("implicit feedback requires non-negative ratings "
                        "(confidence 1 + alpha*r would drop below 1)")
    m, n = train_ratings.m, train_ratings.n
    x = init_factors(m, cfg.f, cfg.init_scale, [cfg.seed, 0])
    theta = init_factors(n, cfg.f, cfg.init_scale, [cfg.seed, 1])

    report = TrainReport(
        engine="implicit",
        config={**asdict(cfg), "engine": "implicit"},
        cold_rows=int((np.diff(train_ratings.row_ptr) == 0).sum()),
        cold_cols=int((np.diff(train_ratings.col_ptr) == 0).sum()),
        flops=roofline_estimate(m, n, max(train_ratings.nnz, 1), cfg.f,
                                f_s=cfg.solver.cg_iters),
    )
    csr, csc = train_ratings.csr_view(), train_ratings.csc_view()
    for epoch in range(cfg.epochs):
        times = PhaseTimes()
        gram_theta = precompute_gram(theta)
        tx, bytes_x, brk_x = implicit_update_side(
            csr, theta, gram_theta, x, cfg.alpha, cfg.lam, cfg.solver, cfg.tiles)
        times += tx
        t0 = time.perf_counter()
        obj_mid = implicit_objective(x, theta, train_ratings, cfg.alpha, cfg.lam)
        times.eval += time.perf_counter() - t0

        gram_x = precompute_gram(x)
        tt, bytes_t, brk_t = implicit_update_side(
            csc, x, gram_x, theta, cfg.alpha, cfg.lam, cfg.solver, cfg.tiles)
        times += tt
        t0 = time.perf_counter()
        obj = implicit_objective(x, theta, train_ratings, cfg.alpha, cfg.lam)
        test_rmse = (preference_rmse(x, theta, test)
                     if test is not None and len(test) else None)
        times.eval += time.perf_counter() - t0

        report.gram_bytes_x = bytes_x
        report.gram_bytes_theta = bytes_t
        report.add_epoch(EpochRecord.from_phases(
            epoch, obj, times, objective_mid=obj_mid, rmse=test_rmse,
            cg_breakdowns=brk_x + brk_t))
    report.stop_reason = "epochs"
    return x, theta, report
