"""Parallel SGD baseline for matrix factorization.

Per sample (u, v, r) with error e = x_u . theta_v - r, the step updates
both factor rows simultaneously from their pre-step values:

    x_u     <- x_u     - lr * (e * theta_v + lambda * x_u)
    theta_v <- theta_v - lr * (e * x_u     + lambda * theta_v)

One epoch is a full pass over the triples in seeded-shuffle order with a
per-epoch learning rate lr_k = lr0 / (1 + decay * k). Serial mode is
bitwise reproducible per seed. Hogwild mode splits the shuffled sequence
across threads that write factor rows without locks; conflicting updates
may overwrite each other, which is acceptable by design when the matrix
is sparse, and the mode is consequently not bitwise reproducible (except
with one worker, which is identical to serial mode).
"""

import threading
import time
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

from .als import objective, rmse
from .data import SparseRatings, Triples
from .errors import DataError, DivergenceError
from .factors import init_factors
from .gram import roofline_estimate
from .report import EpochRecord, PhaseTimes, TrainReport


@dataclass
class SgdConfig:
    f: int = 100
    lam: float = 0.05
    epochs: int = 20
    lr0: float = 0.05
    decay: float = 0.0
    mode: str = "serial"
    seed: int = 0
    workers: int = 1
    init_scale: float = 0.1
    target_rmse: float | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise DataError("lr0 must be > 0")
        if self.decay < 0:
            raise DataError("decay must be >= 0")
        if self.mode not in ("serial", "hogwild"):
            raise DataError(f"unknown sgd mode {self.mode!r}")
        if self.workers < 1:
            raise DataError("workers must be >= 1")


def sgd_step(x_u: np.ndarray, theta_v: np.ndarray, r: float, lr: float, lam: float):
    """One simultaneous update; returns new (x_u, theta_v) copies."""
    x_u = np.asarray(x_u, dtype=np.float32)
    theta_v = np.asarray(theta_v, dtype=np.float32)
    e = np.float32(float(x_u @ theta_v) - r)
    lr = np.float32(lr)
    lam = np.float32(lam)
    x_new = x_u - lr * (e * theta_v + lam * x_u)
    theta_new = theta_v - lr * (e * x_u + lam * theta_v)
    if not (np.isfinite(x_new).all() and np.isfinite(theta_new).all()):
        raise DivergenceError("sgd step produced non-finite values; lower lr0")
    return x_new, theta_new


@njit(cache=True, nogil=True, fastmath=False)
def _sgd_pass(users, items, vals, order, lo, hi, x, theta, lr, lam):
    f = x.shape[1]
    xold = np.empty(f, dtype=np.float32)
    for t in range(lo, hi):
        s = order[t]
        u = users[s]
        v = items[s]
        e = np.float32(0.0)
        for k in range(f):
            e += x[u, k] * theta[v, k]
        e -= vals[s]
        for k in range(f):
            xold[k] = x[u, k]
        for k in range(f):
            x[u, k] = xold[k] - lr * (e * theta[v, k] + lam * xold[k])
        for k in range(f):
            theta[v, k] = theta[v, k] - lr * (e * xold[k] + lam * theta[v, k])


def _epoch_order(nnz: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(nnz)


def sgd_epoch(triples: Triples, x: np.ndarray, theta: np.ndarray,
              cfg: SgdConfig, epoch: int):
    """One full permuted pass; mutates x and theta in place."""
    users = triples.user.astype(np.int32)
    items = triples.item.astype(np.int32)
    vals = triples.rating.astype(np.float32)
    order = _epoch_order(len(triples), cfg.seed, epoch)
    lr = np.float32(cfg.lr0 / (1.0 + cfg.decay * epoch))
    lam = np.float32(cfg.lam)

    if cfg.mode == "serial" or cfg.workers == 1:
        _sgd_pass(users, items, vals, order, 0, len(triples), x, theta, lr, lam)
    else:
        bounds = np.linspace(0, len(triples), cfg.workers + 1, dtype=np.int64)
        threads = [
            threading.Thread(
                target=_sgd_pass,
                args=(users, items, vals, order, int(bounds[w]), int(bounds[w + 1]),
                      x, theta, lr, lam))
            for w in range(cfg.workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    if not (np.isfinite(x).all() and np.isfinite(theta).all()):
        raise DivergenceError(
            f"sgd diverged in epoch {epoch} (lr={float(lr):.3g}); lower lr0")
    return x, theta


def sgd_train(train_ratings: SparseRatings, test: Triples | None, cfg: SgdConfig):
    """Epoch loop with decayed learning rate.

    Returns (X, Theta, TrainReport) with the same report schema as ALS:
    the objective column is the explicit weighted-lambda objective, and
    the pass time is recorded under time_update.
    """
    m, n = train_ratings.m, train_ratings.n
    x = init_factors(m, cfg.f, cfg.init_scale, [cfg.seed, 0])
    theta = init_factors(n, cfg.f, cfg.init_scale, [cfg.seed, 1])
    triples = train_ratings.to_triples()

    report = TrainReport(
        engine="sgd",
        config={**asdict(cfg), "engine": "sgd"},
        cold_rows=int((np.diff(train_ratings.row_ptr) == 0).sum()),
        cold_cols=int((np.diff(train_ratings.col_ptr) == 0).sum()),
        flops=roofline_estimate(m, n, max(train_ratings.nnz, 1), cfg.f),
    )
    stop_reason = "epochs"
    for epoch in range(cfg.epochs):
        times = PhaseTimes()
        t0 = time.perf_counter()
        sgd_epoch(triples, x, theta, cfg, epoch)
        times.update = time.perf_counter() - t0

        t0 = time.perf_counter()
        obj = objective(x, theta, train_ratings, cfg.lam, weighted=True)
        test_rmse = rmse(x, theta, test) if test is not None and len(test) else None
        times.eval = time.perf_counter() - t0

        report.add_epoch(EpochRecord.from_phases(epoch, obj, times, rmse=test_rmse))
        if (cfg.target_rmse is not None and test_rmse is not None
                and test_rmse <= cfg.target_rmse):
            stop_reason = "target_rmse"
            break
    report.stop_reason = stop_reason
    return x, theta, report
