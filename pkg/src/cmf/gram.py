"""Per-row normal-equation assembly with cache-blocked, symmetric-half tiles.

For each row u with observed columns S and fixed features Theta, the system

    A_u = sum_{v in S} theta_v theta_v^T + reg * I,      b_u = sum_{v in S} r_uv theta_v

is assembled by staging ``batch`` feature rows at a time into a small
contiguous buffer and accumulating their outer products tile by tile into
the lower triangle only; the upper triangle is mirrored logically. The
regularizer is lambda * n_u by default (weighted form) or plain lambda.

Accumulation is always FP32. Choosing 16-bit precision converts the packed
lower triangle on store, which exactly halves the bytes held per system;
the accumulation path is unchanged.

Each matrix entry receives exactly one fused update per observed column,
applied in CSR order, so results are bitwise identical across every tile
and batch configuration and across worker counts.

Packing order is row-major over the lower triangle: entry (i, j), j <= i,
lives at index i*(i+1)/2 + j.
"""

import time
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .data import RowView, SparseRatings
from .errors import DataError, NumericalError
from .report import PhaseTimes

# Rows are processed in chunks whose staged feature rows stay within this
# many float32 elements (16 MB).
_CHUNK_STAGED_FLOATS = 4 * 1024 * 1024


@dataclass
class TileConfig:
    """Tiled-accumulation shape: ``tile`` is the sub-block edge length,
    ``batch`` the number of feature rows staged per inner pass."""

    tile: int = 8
    batch: int = 32

    def __post_init__(self):
        if self.tile < 1:
            raise DataError("tile must be >= 1")
        if self.batch < 1:
            raise DataError("batch must be >= 1")


@dataclass
class GramSystem:
    """One row's f x f system, lower triangle packed."""

    f: int
    a_lower: np.ndarray          # (f*(f+1)/2,) float32 or float16
    b: np.ndarray | None = None  # (f,) float32
    n_u: int = 0

    @property
    def precision(self) -> str:
        return "fp16" if self.a_lower.dtype == np.float16 else "fp32"

    @property
    def is_empty(self) -> bool:
        return self.n_u == 0

    def full(self) -> np.ndarray:
        """Reconstruct the symmetric f x f matrix in float32."""
        return unpack_lower(self.a_lower, self.f)


@dataclass
class GramBatch:
    """Stacked systems sharing one factor dimension."""

    f: int
    a_lower: np.ndarray  # (N, f*(f+1)/2)
    b: np.ndarray        # (N, f) float32
    n_u: np.ndarray      # (N,) int64

    def __len__(self):
        return self.a_lower.shape[0]

    def __getitem__(self, i: int) -> GramSystem:
        return GramSystem(self.f, self.a_lower[i], self.b[i], int(self.n_u[i]))

    @property
    def precision(self) -> str:
        return "fp16" if self.a_lower.dtype == np.float16 else "fp32"

    @property
    def a_nbytes(self) -> int:
        return self.a_lower.nbytes

    @classmethod
    def stack(cls, systems) -> "GramBatch":
        systems = list(systems)
        if not systems:
            raise DataError("cannot stack an empty sequence of systems")
        f = systems[0].f
        if any(s.f != f for s in systems):
            raise DataError("all systems in a batch must share f")
        a = np.stack([s.a_lower for s in systems])
        b = np.stack([s.b for s in systems])
        nu = np.asarray([s.n_u for s in systems], dtype=np.int64)
        return cls(f, a, b, nu)


def packed_size(f: int) -> int:
    return f * (f + 1) // 2


def pack_lower(full: np.ndarray) -> np.ndarray:
    """Packed row-major lower triangle of a square matrix, float32."""
    f = full.shape[0]
    return np.ascontiguousarray(full[np.tril_indices(f)], dtype=np.float32)


def unpack_lower(packed: np.ndarray, f: int) -> np.ndarray:
    """Symmetric float32 square matrix from packed lower-triangle storage."""
    full = np.zeros((f, f), dtype=np.float32)
    il = np.tril_indices(f)
    full[il] = packed.astype(np.float32)
    full.T[il] = full[il]
    return full


def pack_half(a_lower: np.ndarray) -> np.ndarray:
    """Round packed FP32 storage to binary16 (round-to-nearest-even).

    Raises NumericalError if any entry overflows the binary16 finite range
    (about +-65504); rescaling the ratings brings the Gram entries back in
    range.
    """
    with np.errstate(over="ignore"):
        out = a_lower.astype(np.float16)
    if not np.isfinite(out[np.isfinite(a_lower)]).all():
        raise NumericalError(
            "Gram entries overflow binary16 range (+-65504); "
            "rescale the ratings before using half precision"
        )
    return out


@njit(cache=True, fastmath=False)
def _accumulate_row(staged, weights, lo, hi, base, lam, weighted_reg, tile, batch,
                    scratch, buf_raw, buf_scaled):
    """Tiled lower-half accumulation for one row; see module docstring."""
    f = scratch.shape[0]
    k = 0
    for i in range(f):
        for j in range(i + 1):
            scratch[i, j] = base[k]
            k += 1
    pos = lo
    while pos < hi:
        nb = min(batch, hi - pos)
        for b in range(nb):          # stage one pass of feature rows
            w = weights[pos + b]
            for c in range(f):
                t = staged[pos + b, c]
                buf_raw[b, c] = t
                buf_scaled[b, c] = w * t
        for b in range(nb):
            ti = 0
            while ti < f:
                ihi = min(ti + tile, f)
                tj = 0
                while tj <= ti:      # lower tile pairs only
                    jhi = min(tj + tile, f)
                    for i in range(ti, ihi):
                        c = buf_scaled[b, i]
                        jmax = jhi if jhi <= i else i + 1
                        for j in range(tj, jmax):
                            scratch[i, j] += c * buf_raw[b, j]
                    tj += tile
                ti += tile
        pos += nb
    n_u = hi - lo
    reg = np.float32(lam * n_u) if weighted_reg else np.float32(lam)
    for i in range(f):
        scratch[i, i] += reg
    return n_u


@njit(parallel=True, cache=True, fastmath=False)
def _accumulate_chunk(indptr, staged, weights, base, lam, weighted_reg, tile, batch,
                      out_packed, out_nu):
    nrows = indptr.shape[0] - 1
    f = staged.shape[1]
    for u in prange(nrows):
        scratch = np.empty((f, f), dtype=np.float32)
        buf_raw = np.empty((batch, f), dtype=np.float32)
        buf_scaled = np.empty((batch, f), dtype=np.float32)
        n_u = _accumulate_row(staged, weights, indptr[u], indptr[u + 1], base, lam,
                              weighted_reg, tile, batch, scratch, buf_raw, buf_scaled)
        k = 0
        for i in range(f):
            for j in range(i + 1):
                out_packed[u, k] = scratch[i, j]
                k += 1
        out_nu[u] = n_u


@njit(parallel=True, cache=True, fastmath=False)
def _bias_chunk(indptr, staged, weights, out_b):
    nrows = indptr.shape[0] - 1
    f = staged.shape[1]
    for u in prange(nrows):
        acc = np.zeros(f, dtype=np.float64)
        for p in range(indptr[u], indptr[u + 1]):
            w = np.float64(weights[p])
            for c in range(f):
                acc[c] += w * np.float64(staged[p, c])
        for c in range(f):
            out_b[u, c] = np.float32(acc[c])


def _row_chunks(indptr, f):
    """Yield (row_lo, row_hi) so each chunk's staged rows fit the budget."""
    nrows = indptr.shape[0] - 1
    target = max(_CHUNK_STAGED_FLOATS // max(f, 1), 1)
    lo = 0
    while lo < nrows:
        hi = lo + 1
        while hi < nrows and indptr[hi + 1] - indptr[lo] <= target:
            hi += 1
        yield lo, hi
        lo = hi


def assemble_side(view: RowView, theta: np.ndarray, lam: float,
                  cfg: TileConfig | None = None, precision: str = "fp32",
                  weighted_reg: bool = True, a_weights: np.ndarray | None = None,
                  b_weights: np.ndarray | None = None,
                  base_packed: np.ndarray | None = None):
    """Assemble every row's system for one half-update.

    Parameters
    ----------
    view : RowView
        CSR view for update-X (theta = item factors), CSC view for
        update-Theta (theta = user factors).
    a_weights, b_weights : optional per-nonzero weights
        Defaults are 1 for A (plain outer products) and the rating for b.
        The implicit engine passes alpha*r and 1+alpha*r instead.
    base_packed : optional packed matrix added to every A (implicit Gram).

    Returns (GramBatch, PhaseTimes) with stage/accumulate/store/bias filled.
    """
    if cfg is None:
        cfg = TileConfig()
    if precision not in ("fp32", "fp16"):
        raise DataError(f"unknown precision {precision!r}")
    f = theta.shape[1]
    if view.ncols != theta.shape[0]:
        raise DataError(
            f"feature matrix has {theta.shape[0]} rows, ratings expect {view.ncols}"
        )
    theta = np.ascontiguousarray(theta, dtype=np.float32)
    tile = min(int(cfg.tile), f)
    batch = int(cfg.batch)
    P = packed_size(f)
    nrows = view.nrows
    if base_packed is None:
        base_packed = np.zeros(P, dtype=np.float32)
    else:
        base_packed = np.ascontiguousarray(base_packed, dtype=np.float32)
        if base_packed.shape[0] != P:
            raise DataError("base matrix does not match the factor dimension")
    if a_weights is None:
        a_weights = np.ones(view.indices.shape[0], dtype=np.float32)
    if b_weights is None:
        b_weights = view.values

    out_dtype = np.float16 if precision == "fp16" else np.float32
    a_out = np.empty((nrows, P), dtype=out_dtype)
    b_out = np.empty((nrows, f), dtype=np.float32)
    nu_out = np.empty(nrows, dtype=np.int64)
    times = PhaseTimes()

    for lo, hi in _row_chunks(view.indptr, f):
        idx_lo, idx_hi = view.indptr[lo], view.indptr[hi]
        local_indptr = (view.indptr[lo:hi + 1] - idx_lo).astype(np.int64)

        t0 = time.perf_counter()
        staged = theta.take(view.indices[idx_lo:idx_hi], axis=0)
        t1 = time.perf_counter()

        chunk_packed = np.empty((hi - lo, P), dtype=np.float32)
        _accumulate_chunk(local_indptr, staged, a_weights[idx_lo:idx_hi],
                          base_packed, float(lam), weighted_reg, tile, batch,
                          chunk_packed, nu_out[lo:hi])
        t2 = time.perf_counter()

        if precision == "fp16":
            a_out[lo:hi] = pack_half(chunk_packed)
        else:
            a_out[lo:hi] = chunk_packed
        t3 = time.perf_counter()

        _bias_chunk(local_indptr, staged, b_weights[idx_lo:idx_hi], b_out[lo:hi])
        t4 = time.perf_counter()

        times.stage += t1 - t0
        times.accumulate += t2 - t1
        times.store += t3 - t2
        times.bias += t4 - t3

    return GramBatch(f, a_out, b_out, nu_out), times


def get_hermitian(ratings: SparseRatings, u: int, theta: np.ndarray, lam: float,
                  cfg: TileConfig | None = None, precision: str = "fp32",
                  weighted_reg: bool = True) -> GramSystem:
    """Assemble A_u for one row from the CSR view. ``b`` is left unset;
    see :func:`get_bias`."""
    view = ratings.csr_view()
    one = RowView(view.indptr[u:u + 2] - view.indptr[u],
                  view.indices[view.indptr[u]:view.indptr[u + 1]],
                  view.values[view.indptr[u]:view.indptr[u + 1]],
                  1, view.ncols)
    batch, _ = assemble_side(one, theta, lam, cfg=cfg, precision=precision,
                             weighted_reg=weighted_reg)
    sys = batch[0]
    sys.b = None
    return sys


def get_bias(ratings: SparseRatings, u: int, theta: np.ndarray) -> np.ndarray:
    """b_u = sum over observed columns of r_uv * theta_v, float32."""
    if theta.shape[0] != ratings.n:
        raise DataError(
            f"feature matrix has {theta.shape[0]} rows, ratings expect {ratings.n}"
        )
    cols, vals = ratings.row(u)
    if cols.shape[0] == 0:
        return np.zeros(theta.shape[1], dtype=np.float32)
    acc = (vals.astype(np.float64)[:, None] * theta[cols].astype(np.float64)).sum(axis=0)
    return acc.astype(np.float32)


def roofline_estimate(m: int, n: int, nnz: int, f: int, f_s: int = 6) -> dict:
    """Leading-order compute and memory counts, explicit constants.

    Conventions (FMA counted as 2 flops):

    - ``hermitian_flops``: one assembly pass over all stored ratings (one
      half-update): 2 * nnz * f*(f+1)/2.
    - ``hermitian_bytes``: same pass, update-X orientation: 4*nnz*f feature
      reads, 4*m*(f*(f+1)/2 + f) system writes, 8*nnz index+rating reads.
      Swap m for n for the update-Theta pass.
    - ``solve_flops_exact``: conventional f^3 flops per dense f x f system,
      (m+n) systems per epoch.
    - ``solve_flops_cg``: f_s * (2*f^2 + 10*f) per system (one matvec plus
      five vector operations per iteration), (m+n) systems per epoch.
    - ``sgd_flops``: 12 * f per sample (one predicting dot plus two
      regularized vector updates); ``sgd_bytes``: 4*(4*f + 3) per sample
      (both factor rows read and written, plus the sample itself).
    - ``*_cm_ratio``: asymptotic compute-to-memory ratios in element units,
      f for Gram assembly and 1 for SGD.
    """
    if min(m, n, nnz, f) <= 0:
        raise DataError("all roofline inputs must be positive")
    if f_s < 1:
        raise DataError("f_s must be >= 1")
    P = packed_size(f)
    return {
        "hermitian_flops": 2 * nnz * P,
        "hermitian_bytes": 4 * nnz * f + 4 * m * (P + f) + 8 * nnz,
        "solve_flops_exact": (m + n) * f ** 3,
        "solve_flops_cg": (m + n) * f_s * (2 * f * f + 10 * f),
        "sgd_flops": 12 * nnz * f,
        "sgd_bytes": 4 * nnz * (4 * f + 3),
        "hermitian_cm_ratio": float(f),
        "sgd_cm_ratio": 1.0,
    }
