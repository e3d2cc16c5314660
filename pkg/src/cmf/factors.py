"""Dense latent-factor matrices: initialization, prediction, model files.

A factor matrix is a plain C-contiguous float32 ndarray of shape
(rows, f); one row per user (or item).

Model file format (little-endian):

    magic  b"CMFM"
    u32    version (currently 1)
    u64    m
    u64    n
    u32    f
    f32[]  X, m*f values, row-major
    f32[]  Theta, n*f values, row-major
"""

import struct

import numpy as np

from .errors import DataError, FormatError

MODEL_MAGIC = b"CMFM"
MODEL_VERSION = 1

_PREDICT_CHUNK = 1 << 18


def init_factors(rows: int, f: int, init_scale: float = 0.1, seed: int = 0) -> np.ndarray:
    """Draw a (rows, f) float32 matrix i.i.d. uniform on [-init_scale, init_scale].

    Bitwise reproducible for a fixed seed.
    """
    if init_scale <= 0:
        raise DataError("init_scale must be positive")
    rng = np.random.default_rng(seed)
    raw = rng.random((rows, f), dtype=np.float32)
    return (raw * np.float32(2.0) - np.float32(1.0)) * np.float32(init_scale)


def predict_pairs(x: np.ndarray, theta: np.ndarray, users, items) -> np.ndarray:
    """Predicted ratings x_u . theta_v for paired index arrays, float32.

    This is the single prediction routine used everywhere (evaluation and
    synthetic-data generation), so noiseless synthetic data round-trips to
    an exact RMSE of zero.
    """
    users = np.asarray(users)
    items = np.asarray(items)
    out = np.empty(users.shape[0], dtype=np.float32)
    for lo in range(0, users.shape[0], _PREDICT_CHUNK):
        hi = min(lo + _PREDICT_CHUNK, users.shape[0])
        out[lo:hi] = np.einsum("ij,ij->i", x[users[lo:hi]], theta[items[lo:hi]])
    return out


def save_model(path, x: np.ndarray, theta: np.ndarray) -> None:
    """Write both factor matrices in the CMFM binary format."""
    x = np.ascontiguousarray(x, dtype="<f4")
    theta = np.ascontiguousarray(theta, dtype="<f4")
    if x.ndim != 2 or theta.ndim != 2 or x.shape[1] != theta.shape[1]:
        raise DataError("factor matrices must be 2-D with a shared factor dimension")
    m, f = x.shape
    n = theta.shape[0]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IQQI", MODEL_VERSION, m, n, f))
        fh.write(x.tobytes())
        fh.write(theta.tobytes())


def load_model(path):
    """Read a CMFM model file, returning (x, theta)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise FormatError(f"{path}: not a model file (bad magic {magic!r})")
        header = fh.read(struct.calcsize("<IQQI"))
        if len(header) != struct.calcsize("<IQQI"):
            raise FormatError(f"{path}: truncated header")
        version, m, n, f = struct.unpack("<IQQI", header)
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported model version {version}")
        payload = fh.read(4 * (m + n) * f)
        if len(payload) != 4 * (m + n) * f:
            raise FormatError(f"{path}: truncated payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    flat = np.frombuffer(payload, dtype="<f4")
    x = flat[: m * f].reshape(m, f).copy()
    theta = flat[m * f :].reshape(n, f).copy()
    return x, theta
