"""Explicit-feedback ALS: alternate row solves against the weighted-lambda
squared-error objective

    sum_{r_uv != 0} (r_uv - x_u . theta_v)^2
        + lambda * (sum_u n_u ||x_u||^2 + sum_v n_v ||theta_v||^2)

where n_u and n_v count the observed ratings in each row and column. Every
epoch updates X from the CSR view with Theta fixed, then Theta from the
CSC view with X fixed; each row solve is an independent f x f SPD system,
so the half-update parallelizes over rows with no shared mutable state.

Rows or columns with no observed ratings keep their initialized vectors;
their counts are flagged in the report. A half-update materializes all of
its systems (rows * f*(f+1)/2 floats, half that under fp16 storage) before
the batched solve, mirroring the two-step assemble-then-solve scheme.
"""

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import SparseRatings, Triples, RowView
from .errors import DataError
from .factors import init_factors, predict_pairs, save_model, load_model  # noqa: F401
from .gram import TileConfig, assemble_side, roofline_estimate
from .report import EpochRecord, PhaseTimes, TrainReport
from .solvers import SolverConfig, batch_solve

_OBJ_CHUNK = 1 << 18


@dataclass
class AlsConfig:
    f: int = 100
    lam: float = 0.05
    epochs: int = 10
    solver: SolverConfig = field(default_factory=SolverConfig)
    init_scale: float = 0.1
    seed: int = 0
    target_rmse: float | None = None
    weighted_reg: bool = True
    tiles: TileConfig = field(default_factory=TileConfig)

    def __post_init__(self):
        if self.f < 1:
            raise DataError("f must be >= 1")
        if self.lam < 0:
            raise DataError("lambda must be >= 0")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")


def update_side(view: RowView, fixed: np.ndarray, target: np.ndarray, lam: float,
                solver: SolverConfig, tiles: TileConfig | None = None,
                weighted_reg: bool = True):
    """One half-update: solve every row system of ``view`` and write the
    solutions into ``target`` in place. ``fixed`` is read-only.

    Rows without observations are left unchanged. Returns
    (PhaseTimes, gram_bytes, cg_breakdowns).
    """
    if target.shape[0] != view.nrows or fixed.shape[1] != target.shape[1]:
        raise DataError("factor matrices do not match the ratings view")
    batch, times = assemble_side(view, fixed, lam, cfg=tiles,
                                 precision=solver.precision,
                                 weighted_reg=weighted_reg)
    t0 = time.perf_counter()
    sel = np.flatnonzero(batch.n_u > 0)
    sub = type(batch)(batch.f, batch.a_lower[sel], batch.b[sel], batch.n_u[sel])
    result = batch_solve(sub, target[sel], solver)
    target[sel] = result.x
    times.solve += time.perf_counter() - t0
    return times, batch.a_nbytes, result.breakdowns


def objective(x: np.ndarray, theta: np.ndarray, ratings: SparseRatings,
              lam: float, weighted: bool = True) -> float:
    """Training objective, evaluated in float64."""
    total = 0.0
    users = np.repeat(np.arange(ratings.m, dtype=np.int64), np.diff(ratings.row_ptr))
    for lo in range(0, ratings.nnz, _OBJ_CHUNK):
        hi = min(lo + _OBJ_CHUNK, ratings.nnz)
        pred = np.einsum("ij,ij->i",
                         x[users[lo:hi]].astype(np.float64),
                         theta[ratings.col_idx[lo:hi]].astype(np.float64))
        diff = ratings.csr_val[lo:hi].astype(np.float64) - pred
        total += float(diff @ diff)
    n_u = np.diff(ratings.row_ptr).astype(np.float64)
    n_v = np.diff(ratings.col_ptr).astype(np.float64)
    sq_x = (x.astype(np.float64) ** 2).sum(axis=1)
    sq_t = (theta.astype(np.float64) ** 2).sum(axis=1)
    if weighted:
        reg = float(n_u @ sq_x + n_v @ sq_t)
    else:
        reg = float(sq_x.sum() + sq_t.sum())
    return total + lam * reg


def rmse(x: np.ndarray, theta: np.ndarray, test: Triples) -> float:
    """Root mean square error over held-out triples. Predictions are not
    clamped to the rating range."""
    if len(test) == 0:
        raise DataError("cannot evaluate RMSE on an empty test set")
    pred = predict_pairs(x, theta, test.user, test.item)
    diff = test.rating.astype(np.float64) - pred.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def train(train_ratings: SparseRatings, test: Triples | None, cfg: AlsConfig):
    """Run ALS for cfg.epochs (or until test RMSE reaches cfg.target_rmse).

    Returns (X, Theta, TrainReport). Deterministic for a fixed seed and
    independent of the worker count.
    """
    m, n = train_ratings.m, train_ratings.n
    x = init_factors(m, cfg.f, cfg.init_scale, [cfg.seed, 0])
    theta = init_factors(n, cfg.f, cfg.init_scale, [cfg.seed, 1])

    report = TrainReport(
        engine="als",
        config=_config_dict(cfg),
        cold_rows=int((np.diff(train_ratings.row_ptr) == 0).sum()),
        cold_cols=int((np.diff(train_ratings.col_ptr) == 0).sum()),
        flops=roofline_estimate(m, n, max(train_ratings.nnz, 1), cfg.f,
                                f_s=cfg.solver.cg_iters),
    )
    csr, csc = train_ratings.csr_view(), train_ratings.csc_view()
    stop_reason = "epochs"
    for epoch in range(cfg.epochs):
        times = PhaseTimes()
        tx, bytes_x, brk_x = update_side(csr, theta, x, cfg.lam, cfg.solver,
                                         cfg.tiles, cfg.weighted_reg)
        times += tx
        t0 = time.perf_counter()
        obj_mid = objective(x, theta, train_ratings, cfg.lam, cfg.weighted_reg)
        times.eval += time.perf_counter() - t0

        tt, bytes_t, brk_t = update_side(csc, x, theta, cfg.lam, cfg.solver,
                                         cfg.tiles, cfg.weighted_reg)
        times += tt
        t0 = time.perf_counter()
        obj = objective(x, theta, train_ratings, cfg.lam, cfg.weighted_reg)
        test_rmse = rmse(x, theta, test) if test is not None and len(test) else None
        times.eval += time.perf_counter() - t0

        report.gram_bytes_x = bytes_x
        report.gram_bytes_theta = bytes_t
        report.add_epoch(EpochRecord.from_phases(
            epoch, obj, times, objective_mid=obj_mid, rmse=test_rmse,
            cg_breakdowns=brk_x + brk_t))
        if (cfg.target_rmse is not None and test_rmse is not None
                and test_rmse <= cfg.target_rmse):
            stop_reason = "target_rmse"
            break
    report.stop_reason = stop_reason
    return x, theta, report


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    d["engine"] = "als"
    return d
