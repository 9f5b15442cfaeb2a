"""Dense numerics shared by every other module.

Arrays are stored as float32; norms, sums and softmax denominators are
accumulated in float64 and rounded back on output.
"""
import numpy as np

from ._backend import kernels
from .errors import DimensionMismatch, EmptyGrid, NumericError, ZeroNorm

EPS = 1e-12
# source coordinate = dst_index * (src_dim - 1) / (dst_dim - 1)
BILINEAR_CONVENTION = "corner_aligned"


def as_matrix(data, name="matrix"):
    """Validate a 2-D finite array and return it as float32."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name}: expected 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite values")
    return arr


def l2_normalize(v, axis=-1, eps=EPS):
    """Scale ``v`` (or each slice along ``axis``) to unit Euclidean norm.

    Raises ZeroNorm when any norm is at or below ``eps``.
    """
    v = np.asarray(v)
    out_dtype = v.dtype if v.dtype in (np.float32, np.float64) else np.float32
    v64 = v.astype(np.float64)
    norm = np.sqrt(np.sum(v64 * v64, axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise ZeroNorm("cannot normalize a vector with zero norm")
    return (v64 / norm).astype(out_dtype)


def stable_softmax(x, axis=-1):
    x64 = np.asarray(x, dtype=np.float64)
    z = np.exp(x64 - np.max(x64, axis=axis, keepdims=True))
    out = z / np.sum(z, axis=axis, keepdims=True)
    return out.astype(np.float32) if np.asarray(x).dtype == np.float32 else out


def logsumexp(x, axis=-1):
    x64 = np.asarray(x, dtype=np.float64)
    m = np.max(x64, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x64 - m), axis=axis))


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x_arr = np.asarray(x)
    x64 = x_arr.astype(np.float64)
    e = np.exp(-np.abs(x64))
    out = np.where(x64 >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if x_arr.dtype == np.float32:
        out = out.astype(np.float32)
    return out if out.ndim else float(out)


def bilinear_resize(src, dst_height, dst_width):
    """Resample a 2-D grid with corner-aligned bilinear interpolation."""
    src = np.asarray(src, dtype=np.float32)
    if src.ndim != 2 or src.size == 0:
        raise EmptyGrid(f"bilinear_resize needs a non-empty 2-D grid, got shape {src.shape}")
    if dst_height < 1 or dst_width < 1:
        raise EmptyGrid(f"invalid target size {dst_height}x{dst_width}")
    if src.shape == (dst_height, dst_width):
        return src.copy()
    return kernels.bilinear_resize(src, int(dst_height), int(dst_width))
