"""Sparse rating data: parsing, validation, splitting, synthesis.

One logical rating matrix is kept in both row-major (CSR) and column-major
(CSC) layouts because the two ALS half-updates each consume one
orientation. Indices are 0-based internally; 1-based text input is
supported by the CLI, which shifts on ingestion.

Text format: one ``user<delim>item<delim>rating`` triple per line, tab or
comma delimited, ``#`` comments and blank lines skipped.

Binary cache format (little-endian):

    magic  b"CMFR"
    u32    version (currently 1)
    u64    m
    u64    n
    u64    nnz
    u64[]  row_ptr, m+1 values      } CSR
    u32[]  col_idx, nnz values      }
    f32[]  csr_val, nnz values      }
    u64[]  col_ptr, n+1 values      } CSC
    u32[]  row_idx, nnz values      }
    f32[]  csc_val, nnz values      }

Duplicate (user, item) pairs are legal in text input; the last occurrence
wins when the index structures are built.
"""

import math
import struct
from array import array
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DataError, FormatError, ParseError
from .factors import predict_pairs

CACHE_MAGIC = b"CMFR"
CACHE_VERSION = 1

_DELIMS = {"tsv": "\t", "csv": ","}


class RatingTriple(NamedTuple):
    user: int
    item: int
    rating: float


@dataclass
class Triples:
    """A flat batch of rating triples in file order."""

    user: np.ndarray
    item: np.ndarray
    rating: np.ndarray

    @classmethod
    def from_iter(cls, triples: Iterable) -> "Triples":
        rows = list(triples)
        user = np.fromiter((t[0] for t in rows), dtype=np.int64, count=len(rows))
        item = np.fromiter((t[1] for t in rows), dtype=np.int64, count=len(rows))
        rating = np.fromiter((t[2] for t in rows), dtype=np.float32, count=len(rows))
        return cls(user, item, rating)

    def __len__(self):
        return self.user.shape[0]

    def __getitem__(self, i: int) -> RatingTriple:
        return RatingTriple(int(self.user[i]), int(self.item[i]), float(self.rating[i]))

    def __iter__(self):
        for u, v, r in zip(self.user, self.item, self.rating):
            yield RatingTriple(int(u), int(v), float(r))


class RowView(NamedTuple):
    """One orientation of a SparseRatings: indptr/indices/values arrays."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    nrows: int
    ncols: int


@dataclass(frozen=True)
class SparseRatings:
    """An immutable rating matrix held as paired CSR and CSC structures."""

    m: int
    n: int
    nnz: int
    row_ptr: np.ndarray   # int64, m+1
    col_idx: np.ndarray   # int32, nnz
    csr_val: np.ndarray   # float32, nnz
    col_ptr: np.ndarray   # int64, n+1
    row_idx: np.ndarray   # int32, nnz
    csc_val: np.ndarray   # float32, nnz

    def csr_view(self) -> RowView:
        return RowView(self.row_ptr, self.col_idx, self.csr_val, self.m, self.n)

    def csc_view(self) -> RowView:
        """The transposed orientation: rows of the view are columns of R."""
        return RowView(self.col_ptr, self.row_idx, self.csc_val, self.n, self.m)

    def row(self, u: int):
        """(column indices, values) of row u, CSR order."""
        lo, hi = self.row_ptr[u], self.row_ptr[u + 1]
        return self.col_idx[lo:hi], self.csr_val[lo:hi]

    def col(self, v: int):
        lo, hi = self.col_ptr[v], self.col_ptr[v + 1]
        return self.row_idx[lo:hi], self.csc_val[lo:hi]

    def to_triples(self) -> Triples:
        """All stored entries in CSR (row-major, column-sorted) order."""
        user = np.repeat(np.arange(self.m, dtype=np.int64), np.diff(self.row_ptr))
        return Triples(user, self.col_idx.astype(np.int64), self.csr_val.copy())

    @property
    def nbytes(self) -> int:
        return sum(
            a.nbytes
            for a in (self.row_ptr, self.col_idx, self.csr_val,
                      self.col_ptr, self.row_idx, self.csc_val)
        )


@dataclass
class SyntheticTruth:
    """Ground-truth factors behind a synthetic dataset."""

    x_true: np.ndarray
    theta_true: np.ndarray
    noise_sigma: float


def parse_coo(lines, fmt: str = "tsv", m: int | None = None, n: int | None = None):
    """Parse text triples.

    Parameters
    ----------
    lines : iterable of str, or an open text file
    fmt : "tsv" or "csv"
    m, n : optional explicit dimensions; inferred as max index + 1 otherwise

    Returns
    -------
    (Triples, m, n)
    """
    if fmt not in _DELIMS:
        raise DataError(f"unknown format {fmt!r}; expected 'tsv' or 'csv'")
    delim = _DELIMS[fmt]
    users, items, ratings = array("q"), array("q"), array("f")
    for line_no, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split(delim)
        if len(parts) != 3:
            raise ParseError(
                f"expected 3 fields separated by {delim!r}, got {len(parts)}", line_no
            )
        try:
            u = int(parts[0])
            v = int(parts[1])
            r = float(parts[2])
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        if not math.isfinite(r):
            raise ParseError(f"non-finite rating {parts[2]!r}", line_no)
        if u < 0 or v < 0:
            raise ParseError(f"negative index ({u}, {v})", line_no)
        users.append(u)
        items.append(v)
        ratings.append(r)
    triples = Triples(
        np.frombuffer(users, dtype=np.int64).copy() if users else np.empty(0, np.int64),
        np.frombuffer(items, dtype=np.int64).copy() if items else np.empty(0, np.int64),
        np.frombuffer(ratings, dtype=np.float32).copy() if ratings else np.empty(0, np.float32),
    )
    if m is None:
        m = int(triples.user.max()) + 1 if len(triples) else 0
    if n is None:
        n = int(triples.item.max()) + 1 if len(triples) else 0
    return triples, m, n


def load_coo(path, fmt: str = "tsv", m=None, n=None):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_coo(fh, fmt=fmt, m=m, n=n)


def save_coo(path, triples: Triples, fmt: str = "tsv") -> None:
    delim = _DELIMS[fmt]
    with open(path, "w", encoding="utf-8") as fh:
        for u, v, r in zip(triples.user, triples.item, triples.rating):
            fh.write(f"{u}{delim}{v}{delim}{r:.9g}\n")


def build(triples, m: int | None = None, n: int | None = None) -> SparseRatings:
    """Build CSR and CSC index structures from triples.

    Duplicate (user, item) pairs collapse to the last occurrence. Raises
    DataError naming the first out-of-range triple.
    """
    if not isinstance(triples, Triples):
        triples = Triples.from_iter(triples)
    if m is None:
        m = int(triples.user.max()) + 1 if len(triples) else 0
    if n is None:
        n = int(triples.item.max()) + 1 if len(triples) else 0

    user, item, val = triples.user, triples.item, triples.rating
    bad = (user < 0) | (user >= m) | (item < 0) | (item >= n)
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(
            f"triple ({int(user[i])}, {int(item[i])}, {float(val[i])}) "
            f"out of range for a {m}x{n} matrix"
        )

    # Sort by (user, item, file position); the last element of each
    # duplicate run is the last occurrence in file order.
    seq = np.arange(len(triples), dtype=np.int64)
    order = np.lexsort((seq, item, user))
    su, si, sv = user[order], item[order], val[order]
    if len(triples):
        last = np.ones(len(triples), dtype=bool)
        last[:-1] = (su[:-1] != su[1:]) | (si[:-1] != si[1:])
        su, si, sv = su[last], si[last], sv[last]
    nnz = su.shape[0]

    row_ptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(su, minlength=m), out=row_ptr[1:])
    col_idx = si.astype(np.int32)
    csr_val = sv.astype(np.float32)

    corder = np.lexsort((su, si))
    col_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(si, minlength=n), out=col_ptr[1:])
    row_idx = su[corder].astype(np.int32)
    csc_val = sv[corder].astype(np.float32)

    return SparseRatings(m, n, int(nnz), row_ptr, col_idx, csr_val, col_ptr, row_idx, csc_val)


def split_holdout(triples: Triples, test_fraction: float, seed: int):
    """Deterministic disjoint train/test split.

    |test| = round(test_fraction * len(triples)); file order is preserved
    within each part.
    """
    if not (0.0 < test_fraction < 1.0):
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    total = len(triples)
    k = int(round(test_fraction * total))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(total)
    test_idx = np.sort(perm[:k])
    train_idx = np.sort(perm[k:])
    pick = lambda idx: Triples(triples.user[idx], triples.item[idx], triples.rating[idx])
    return pick(train_idx), pick(test_idx)


def gen_synthetic(m, n, f, density, noise_sigma, seed):
    """Sample a low-rank-plus-noise rating matrix.

    Ground-truth factor entries are i.i.d. uniform on [-0.5, 0.5]; exactly
    round(density * m * n) distinct positions are sampled without
    replacement; each rating is the factor dot product plus N(0, sigma)
    noise. Intended as a desk-scale fixture (positions are drawn from a
    materialized range of size m * n).

    Returns (Triples, SyntheticTruth).
    """
    if not (0.0 < density <= 1.0):
        raise DataError(f"density must be in (0, 1], got {density}")
    if f < 1:
        raise DataError("f must be >= 1")
    k = int(round(density * m * n))
    if k < 1:
        raise DataError(f"density {density} yields no entries for a {m}x{n} matrix")

    rng = np.random.default_rng(seed)
    x_true = ((rng.random((m, f), dtype=np.float32) - np.float32(0.5))).astype(np.float32)
    theta_true = ((rng.random((n, f), dtype=np.float32) - np.float32(0.5))).astype(np.float32)

    flat = rng.choice(m * n, size=k, replace=False)
    flat.sort()
    users = (flat // n).astype(np.int64)
    items = (flat % n).astype(np.int64)

    ratings = predict_pairs(x_true, theta_true, users, items)
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, size=k)
        ratings = (ratings.astype(np.float64) + noise).astype(np.float32)
    return Triples(users, items, ratings), SyntheticTruth(x_true, theta_true, noise_sigma)


def save_cache(path, sr: SparseRatings) -> None:
    """Write the binary CMFR cache."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQQQ", CACHE_VERSION, sr.m, sr.n, sr.nnz))
        for arr, dt in (
            (sr.row_ptr, "<u8"), (sr.col_idx, "<u4"), (sr.csr_val, "<f4"),
            (sr.col_ptr, "<u8"), (sr.row_idx, "<u4"), (sr.csc_val, "<f4"),
        ):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_cache(path) -> SparseRatings:
    """Read a binary CMFR cache."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise FormatError(f"{path}: not a ratings cache (bad magic {magic!r})")
        header = fh.read(struct.calcsize("<IQQQ"))
        if len(header) != struct.calcsize("<IQQQ"):
            raise FormatError(f"{path}: truncated header")
        version, m, n, nnz = struct.unpack("<IQQQ", header)
        if version != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported cache version {version}")

        def read_arr(count, dt, out_dt):
            raw = fh.read(count * np.dtype(dt).itemsize)
            if len(raw) != count * np.dtype(dt).itemsize:
                raise FormatError(f"{path}: truncated payload")
            return np.frombuffer(raw, dtype=dt).astype(out_dt)

        row_ptr = read_arr(m + 1, "<u8", np.int64)
        col_idx = read_arr(nnz, "<u4", np.int32)
        csr_val = read_arr(nnz, "<f4", np.float32)
        col_ptr = read_arr(n + 1, "<u8", np.int64)
        row_idx = read_arr(nnz, "<u4", np.int32)
        csc_val = read_arr(nnz, "<f4", np.float32)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return SparseRatings(int(m), int(n), int(nnz), row_ptr, col_idx, csr_val,
                         col_ptr, row_idx, csc_val)
