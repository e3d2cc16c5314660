"""Solvers for the batched SPD systems A_u x_u = b_u.

Two routes: a direct Cholesky factorization (the exact O(f^3) baseline,
delegated to LAPACK) and a truncated conjugate-gradient solver stopped
after f_s iterations, which drops the per-system cost to O(f_s * f^2).
The CG matvec can read A from binary16 storage, halving the bytes held
and moved per system.

The CG recurrence is the standard one: the residual update is
r -= alpha * (A @ p). Stored A entries (fp32 or fp16) are promoted
element-wise on read; internal vectors and dot products are carried in
float64 so that a full-length CG run (f_s = f) reproduces the direct
solution to well below the 1e-4 equivalence bound, and the result is
rounded to float32 on return.

A non-positive curvature value (p^T A p <= 0, possible under 16-bit
rounding) terminates the iteration and returns the current iterate; the
event is counted, not raised, since ALS tolerates inexact row solves.
"""

import time
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.linalg import cho_factor, cho_solve

from .errors import DataError, SingularSystemError
from .gram import GramBatch, GramSystem, unpack_lower

DEFAULT_CG_ITERS = 6
DEFAULT_CG_TOL = 1e-4  # relative to ||b||


@dataclass
class SolverConfig:
    """Solver choice for the ALS update step.

    ``cg_tol`` is relative: each system stops early once the residual norm
    falls below cg_tol * ||b||. ``precision`` selects the storage format
    of A ("fp32" or "fp16"); accumulation and solving are unaffected.
    """

    method: str = "cg"
    cg_iters: int = DEFAULT_CG_ITERS
    cg_tol: float = DEFAULT_CG_TOL
    precision: str = "fp32"

    def __post_init__(self):
        if self.method not in ("exact", "cg"):
            raise DataError(f"unknown solver method {self.method!r}")
        if self.method == "cg" and self.cg_iters < 1:
            raise DataError("cg_iters must be >= 1")
        if self.cg_tol < 0:
            raise DataError("cg_tol must be >= 0")
        if self.precision not in ("fp32", "fp16"):
            raise DataError(f"unknown precision {self.precision!r}")
        if self.method == "exact" and self.precision == "fp16":
            raise DataError("half-precision Gram storage requires the cg solver")


@dataclass
class BatchSolveResult:
    x: np.ndarray           # (N, f) float32
    wall_time: float
    iterations: np.ndarray  # (N,) int64; zeros for the exact solver
    breakdowns: int         # count of p^T A p <= 0 early exits


@njit(cache=True, fastmath=False)
def _symv(sq, p, y):
    # y = sq @ p in column-sweep (saxpy) form: no reduction dependency, so
    # the inner loop vectorizes without reordering any sums.
    f = sq.shape[0]
    for i in range(f):
        y[i] = 0.0
    for j in range(f):
        c = p[j]
        for i in range(f):
            y[i] += sq[j, i] * c


@njit(cache=True, fastmath=False)
def _cg_system(sq, b, x, ap, r, p, f_s, eps):
    """Truncated CG on one unpacked system; returns (iterations, broke_down)."""
    f = b.shape[0]
    _symv(sq, x, ap)
    for i in range(f):
        r[i] = b[i] - ap[i]
    rs_old = 0.0
    for i in range(f):
        p[i] = r[i]
        rs_old += r[i] * r[i]
    it = 0
    for _ in range(f_s):
        _symv(sq, p, ap)
        pap = 0.0
        for i in range(f):
            pap += p[i] * ap[i]
        if pap <= 0.0:
            return it, True
        alpha = rs_old / pap
        for i in range(f):
            x[i] += alpha * p[i]
            r[i] -= alpha * ap[i]
        rs_new = 0.0
        for i in range(f):
            rs_new += r[i] * r[i]
        it += 1
        # rs_new == 0 is exact convergence; also stops a 0/0 in beta when
        # the residual underflows while iterating far past convergence
        if rs_new == 0.0 or np.sqrt(rs_new) < eps:
            break
        beta = rs_new / rs_old
        for i in range(f):
            p[i] = r[i] + beta * p[i]
        rs_old = rs_new
    return it, False


@njit(parallel=True, cache=True, fastmath=False)
def _cg_batch(a_packed, B, X0, f_s, eps, out, iters, broke):
    n_sys, f = B.shape
    for s in prange(n_sys):
        sq = np.empty((f, f), dtype=np.float64)
        k = 0
        for i in range(f):
            for j in range(i + 1):
                v = np.float64(a_packed[s, k])
                sq[i, j] = v
                sq[j, i] = v
                k += 1
        x = np.empty(f, dtype=np.float64)
        b = np.empty(f, dtype=np.float64)
        for i in range(f):
            x[i] = np.float64(X0[s, i])
            b[i] = np.float64(B[s, i])
        ap = np.empty(f, dtype=np.float64)
        r = np.empty(f, dtype=np.float64)
        p = np.empty(f, dtype=np.float64)
        it, bd = _cg_system(sq, b, x, ap, r, p, f_s, eps[s])
        for i in range(f):
            out[s, i] = np.float32(x[i])
        iters[s] = it
        broke[s] = 1 if bd else 0


def exact_solve(system: GramSystem, b: np.ndarray | None = None) -> np.ndarray:
    """Direct solve via Cholesky factorization (LAPACK, float64 internally).

    Raises SingularSystemError when A is not positive definite.
    """
    if system.precision != "fp32":
        raise DataError("exact_solve requires fp32 Gram storage; use cg_solve_half")
    if b is None:
        b = system.b
    if b is None:
        raise DataError("no right-hand side attached to the system")
    full = unpack_lower(system.a_lower, system.f).astype(np.float64)
    try:
        factor = cho_factor(full, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"system is not positive definite: {exc}") from None
    return cho_solve(factor, b.astype(np.float64)).astype(np.float32)


def _tol_abs(b: np.ndarray, eps) -> float:
    if eps is None:
        return DEFAULT_CG_TOL * float(np.linalg.norm(b.astype(np.float64)))
    return float(eps)


def cg_solve(system: GramSystem, x0: np.ndarray, b: np.ndarray | None = None,
             f_s: int = DEFAULT_CG_ITERS, eps: float | None = None,
             return_info: bool = False):
    """Truncated CG from warm start x0. ``eps`` is the absolute residual
    tolerance; None means 1e-4 * ||b||."""
    if b is None:
        b = system.b
    if b is None:
        raise DataError("no right-hand side attached to the system")
    if f_s < 1:
        raise DataError("f_s must be >= 1")
    a32 = system.a_lower.astype(np.float32)  # element-wise promotion if fp16
    out = np.empty((1, system.f), dtype=np.float32)
    iters = np.empty(1, dtype=np.int64)
    broke = np.empty(1, dtype=np.int64)
    _cg_batch(a32[None, :], np.asarray(b, dtype=np.float32)[None, :],
              np.asarray(x0, dtype=np.float32)[None, :], f_s,
              np.asarray([_tol_abs(b, eps)], dtype=np.float64), out, iters, broke)
    if return_info:
        return out[0], {"iterations": int(iters[0]), "breakdown": bool(broke[0])}
    return out[0]


def cg_solve_half(system: GramSystem, x0: np.ndarray, b: np.ndarray | None = None,
                  f_s: int = DEFAULT_CG_ITERS, eps: float | None = None,
                  return_info: bool = False):
    """CG over binary16-stored A; entries are promoted element-wise on read."""
    if system.precision != "fp16":
        raise DataError("cg_solve_half expects fp16 Gram storage")
    return cg_solve(system, x0, b, f_s=f_s, eps=eps, return_info=return_info)


def batch_solve(systems, x0s: np.ndarray, cfg: SolverConfig) -> BatchSolveResult:
    """Apply the configured solver to every system independently.

    ``systems`` is a GramBatch or a sequence of GramSystem sharing f.
    Results are deterministic and independent of the worker count. Exact
    solver failures are aggregated into one SingularSystemError naming the
    offending batch rows.
    """
    if not isinstance(systems, GramBatch):
        systems = GramBatch.stack(systems)
    n_sys, f = len(systems), systems.f
    x0s = np.ascontiguousarray(x0s, dtype=np.float32)
    if x0s.shape != (n_sys, f):
        raise DataError(f"x0 batch must have shape ({n_sys}, {f})")

    t0 = time.perf_counter()
    if cfg.method == "exact":
        if systems.precision != "fp32":
            raise DataError("exact solver cannot read fp16 Gram storage")
        out = np.empty((n_sys, f), dtype=np.float32)
        bad = []
        for s in range(n_sys):
            try:
                out[s] = exact_solve(systems[s], systems.b[s])
            except SingularSystemError:
                bad.append(s)
        if bad:
            raise SingularSystemError(
                f"{len(bad)} singular system(s) in batch (rows {bad[:8]}...)"
                if len(bad) > 8 else
                f"singular system(s) in batch at rows {bad}", rows=bad)
        iters = np.zeros(n_sys, dtype=np.int64)
        breakdowns = 0
    else:
        a32 = systems.a_lower.astype(np.float32)
        eps = cfg.cg_tol * np.linalg.norm(systems.b.astype(np.float64), axis=1)
        out = np.empty((n_sys, f), dtype=np.float32)
        iters = np.empty(n_sys, dtype=np.int64)
        broke = np.empty(n_sys, dtype=np.int64)
        _cg_batch(a32, systems.b, x0s, int(cfg.cg_iters), eps, out, iters, broke)
        breakdowns = int(broke.sum())
    wall = time.perf_counter() - t0
    return BatchSolveResult(out, wall, iters, breakdowns)
