"""Dense float64 array kernels used by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. The
functions here never mutate their inputs.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError, NumericError

DTYPE = np.float64


def as_tensor(x, name="tensor"):
    """Return ``x`` as a C-ordered float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    check_finite(arr, name)
    return arr


def check_finite(arr, name="tensor"):
    if arr.size and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def make_rng(seed):
    """Seeded generator; identical seeds give bitwise-identical streams."""
    if seed is None:
        raise ArgumentError("a seed is required")
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        c = a @ b
    return check_finite(c, "matmul result")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _conv_windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _check_conv(x, kernels, stride, padding):
    if stride < 1 or padding < 0:
        raise ArgumentError(f"invalid stride={stride} / padding={padding}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be c_out x c_in x kh x kw, got {kernels.shape}")
    if x.ndim != 4:
        raise DimensionError(f"conv input must be (batch,) c_in x h x w, got {x.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}")
    kh, kw = kernels.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]} (pad {padding})")


def conv2d(x, kernels, stride=1, padding=0):
    """Cross-correlation of ``x`` (c_in,h,w) or (n,c_in,h,w) with (c_out,c_in,kh,kw)."""
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_conv(x, kernels, stride, padding)
    kh, kw = kernels.shape[2:]
    win = _conv_windows(x, kh, kw, stride, padding)
    # reduction order is (c_in, kh, kw), c_in slowest
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(x, kernels, dout, stride=1, padding=0):
    """Gradients of ``sum(dout * conv2d(x, kernels))`` w.r.t. x and kernels."""
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    n, c, h, w = x.shape
    co, _, kh, kw = kernels.shape
    oh, ow = dout.shape[2:]
    win = _conv_windows(x, kh, kw, stride, padding)
    dk = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(dout, kernels[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib.transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dxp), dk


def spectral_norm_sq(x, max_iter=100_000, tol=1e-8):
    """Largest eigenvalue of ``x.T @ x`` by power iteration.

    The start vector is drawn from a fixed-seed generator so the result is
    reproducible. Iteration stops once the eigen-residual is below
    ``0.01 * sqrt(tol)`` relative; the Rayleigh quotient error is then
    of order residual**2 / gap, well inside ``tol`` unless the top two
    eigenvalues nearly coincide (in which case either is accurate).
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or min(x.shape) < 1:
        raise DimensionError(f"expected a non-empty matrix, got shape {x.shape}")
    gram = x.T @ x
    if not np.any(gram):
        return 0.0
    v = make_rng(0).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    res_tol = 0.01 * np.sqrt(tol)
    for _ in range(max_iter):
        w = gram @ v
        lam = float(v @ w)
        resid = np.linalg.norm(w - lam * v)
        if resid <= res_tol * abs(lam) or resid == 0.0:
            return lam
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    raise NumericError(f"power iteration did not converge in {max_iter} iterations")
