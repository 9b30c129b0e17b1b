"""Dense tensor kernels.

Tensors are plain row-major ``numpy.ndarray`` objects (float32 or float64).
This module holds the forward kernels and, where the autodiff layer needs
them, the matching backward kernels.  Everything here is a pure function of
its inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_MAX_ELEMENTS = 2**40


class ShapeError(ValueError):
    """Incompatible or illegal tensor shape."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class SizeError(ValueError):
    """Requested tensor is too large to allocate."""


class ConfigError(ValueError):
    """Inconsistent block, network or experiment configuration."""


def zeros(shape: Sequence[int], dtype=np.float64) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"shape extents must be >= 1 and rank >= 1, got {shape}")
    if math.prod(shape) > _MAX_ELEMENTS:
        raise SizeError(f"shape {shape} holds more than {_MAX_ELEMENTS} elements")
    return np.zeros(shape, dtype=dtype)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a + b


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def mode_n_product(t: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    """Contract ``w`` (Cout x Cin) against axis ``axis`` of ``t``."""
    axis = _norm_axis(axis, t.ndim)
    if w.ndim != 2 or w.shape[1] != t.shape[axis]:
        raise ShapeError(
            f"matrix {w.shape} does not match extent {t.shape[axis]} on axis {axis}"
        )
    moved = np.moveaxis(t, axis, -1)
    out = moved @ w.T
    return np.moveaxis(out, -1, axis)


def softmax_over_axis(t: np.ndarray, axis: int = -1, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    axis = _norm_axis(axis, t.ndim)
    z = (t - t.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, gy: np.ndarray, axis: int, temperature: float) -> np.ndarray:
    dot = (gy * y).sum(axis=axis, keepdims=True)
    return y * (gy - dot) / temperature


# ---------------------------------------------------------------------------
# convolution over three spatial axes
# ---------------------------------------------------------------------------


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ShapeError(f"{name} must have three entries, got {v}")
    return v


def conv3d_output_shape(spatial, kernel, strides, padding) -> tuple[int, int, int]:
    out = []
    for n, k, s, p in zip(spatial, kernel, strides, padding):
        if s < 1 or p < 0:
            raise ShapeError(f"illegal stride {s} or padding {p}")
        o = (n + 2 * p - k) // s + 1
        if n + 2 * p < k or o < 1:
            raise ShapeError(
                f"kernel {tuple(kernel)} does not fit padded input {tuple(spatial)} (pad {tuple(padding)})"
            )
        out.append(o)
    return tuple(out)


# dense (Toeplitz) matrices are used when their element count stays below this
DENSE_CONV_LIMIT = 400_000


def _pad3(xb: np.ndarray, padding) -> np.ndarray:
    pa, pb, pd = padding
    if not (pa or pb or pd):
        return xb
    n, A, B, D, c = xb.shape
    out = np.zeros((n, A + 2 * pa, B + 2 * pb, D + 2 * pd, c), dtype=xb.dtype)
    out[:, pa : pa + A, pb : pb + B, pd : pd + D] = xb
    return out


def _im2col(xp: np.ndarray, ksz, strides, osz) -> np.ndarray:
    # xp: (N, A, B, D, Cin), already padded
    n, cin = xp.shape[0], xp.shape[-1]
    (ka, kb, kd), (sa, sb, sd), (oa, ob, od) = ksz, strides, osz
    cols = np.empty((n, oa, ob, od, ka, kb, kd, cin), dtype=xp.dtype)
    for a in range(ka):
        for b in range(kb):
            for d in range(kd):
                cols[:, :, :, :, a, b, d, :] = xp[
                    :,
                    a : a + sa * (oa - 1) + 1 : sa,
                    b : b + sb * (ob - 1) + 1 : sb,
                    d : d + sd * (od - 1) + 1 : sd,
                    :,
                ]
    return cols.reshape(n * oa * ob * od, ka * kb * kd * cin)


@lru_cache(maxsize=256)
def _dense_plan(spatial, ksz, strides, padding):
    """Index triples (input position, output position, kernel offset) of every tap."""
    osz = conv3d_output_shape(spatial, ksz, strides, padding)
    grids = np.meshgrid(*(np.arange(o) for o in osz), *(np.arange(k) for k in ksz), indexing="ij")
    o = grids[:3]
    k = grids[3:]
    src = [oi * s + ki - p for oi, ki, s, p in zip(o, k, strides, padding)]
    valid = np.ones(src[0].shape, dtype=bool)
    for si, n in zip(src, spatial):
        valid &= (si >= 0) & (si < n)
    in_idx = np.ravel_multi_index([si[valid] for si in src], spatial)
    out_idx = np.ravel_multi_index([oi[valid] for oi in o], osz)
    k_idx = np.ravel_multi_index([ki[valid] for ki in k], ksz)
    for a in (in_idx, out_idx, k_idx):
        a.setflags(write=False)
    return in_idx, out_idx, k_idx, osz


def _dense_matrix(kernel: np.ndarray, spatial, strides, padding) -> np.ndarray:
    in_idx, out_idx, k_idx, osz = _dense_plan(tuple(spatial), tuple(kernel.shape[:3]), strides, padding)
    cin, cout = kernel.shape[3], kernel.shape[4]
    m = np.zeros((math.prod(spatial), cin, math.prod(osz), cout), dtype=kernel.dtype)
    m[in_idx, :, out_idx, :] = kernel.reshape(-1, cin, cout)[k_idx]
    return m.reshape(math.prod(spatial) * cin, math.prod(osz) * cout)


def _use_dense(spatial, osz, cin, cout) -> bool:
    return math.prod(spatial) * cin * math.prod(osz) * cout <= DENSE_CONV_LIMIT


def _check_conv_args(x: np.ndarray, kernel: np.ndarray):
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must be (kA,kB,kD,Cin,Cout), got {kernel.shape}")
    if x.ndim < 4:
        raise ShapeError(f"input must be (..., A, B, D, Cin), got {x.shape}")
    if x.shape[-1] != kernel.shape[3]:
        raise ShapeError(f"input channels {x.shape[-1]} != kernel Cin {kernel.shape[3]}")


@dataclass
class ConvContext:
    """Whatever :func:`conv3d_backward` needs from the forward pass."""

    x_shape: tuple[int, ...]  # caller's input shape
    work_shape: tuple[int, ...]  # (N, A, B, D, Cin) actually convolved
    strides: tuple[int, int, int]
    padding: tuple[int, int, int]
    osz: tuple[int, int, int]
    dense: bool
    saved: np.ndarray  # flattened input (dense) or im2col matrix


def conv3d(
    x: np.ndarray,
    kernel: np.ndarray,
    strides=(1, 1, 1),
    padding=(0, 0, 0),
    *,
    return_context: bool = False,
):
    """Cross-correlate ``x`` (..., A, B, D, Cin) with ``kernel`` (kA, kB, kD, Cin, Cout).

    Zero padding, no kernel flip.  Small problems run as one matmul against
    the dense (Toeplitz) form of the kernel, larger ones through im2col.
    """
    _check_conv_args(x, kernel)
    strides, padding = _triple(strides, "strides"), _triple(padding, "padding")
    ksz = kernel.shape[:3]
    cin, cout = kernel.shape[3], kernel.shape[4]
    out_shape = x.shape[:-4] + conv3d_output_shape(x.shape[-4:-1], ksz, strides, padding) + (cout,)
    xb = x.reshape((-1,) + x.shape[-4:])
    if ksz[0] == 1 and strides[0] == 1 and padding[0] == 0:
        # a pointwise leading axis is just more batch
        xb = xb.reshape((-1, 1) + xb.shape[-3:])
    spatial = xb.shape[1:4]
    osz = conv3d_output_shape(spatial, ksz, strides, padding)
    dense = _use_dense(spatial, osz, cin, cout)
    if dense:
        saved = xb.reshape(-1, math.prod(spatial) * cin)
        out = saved @ _dense_matrix(kernel, spatial, strides, padding)
    else:
        saved = _im2col(_pad3(xb, padding), ksz, strides, osz)
        out = saved @ kernel.reshape(-1, cout)
    out = out.reshape(out_shape)
    if return_context:
        return out, ConvContext(x.shape, xb.shape, strides, padding, osz, dense, saved)
    return out


def conv3d_backward(gy: np.ndarray, ctx: ConvContext, kernel: np.ndarray, need_input_grad: bool = True):
    """Return ``(grad_x, grad_kernel)`` for :func:`conv3d`; ``grad_x`` is None if not needed."""
    ksz = kernel.shape[:3]
    cin, cout = kernel.shape[3], kernel.shape[4]
    n, spatial = ctx.work_shape[0], ctx.work_shape[1:4]
    osz = ctx.osz
    if ctx.dense:
        gflat = gy.reshape(-1, math.prod(osz) * cout)
        gm = (ctx.saved.T @ gflat).reshape(math.prod(spatial), cin, math.prod(osz), cout)
        in_idx, out_idx, k_idx, _ = _dense_plan(tuple(spatial), tuple(ksz), ctx.strides, ctx.padding)
        gk = np.zeros((math.prod(ksz), cin, cout), dtype=gy.dtype)
        np.add.at(gk, k_idx, gm[in_idx, :, out_idx, :])
        gk = gk.reshape(kernel.shape)
        if not need_input_grad:
            return None, gk
        gx = gflat @ _dense_matrix(kernel, spatial, ctx.strides, ctx.padding).T
        return gx.reshape(ctx.x_shape), gk

    gflat = gy.reshape(-1, cout)
    gk = (ctx.saved.T @ gflat).reshape(kernel.shape)
    if not need_input_grad:
        return None, gk
    pa, pb, pd = ctx.padding
    gcols = (gflat @ kernel.reshape(-1, cout).T).reshape((n,) + osz + tuple(ksz) + (cin,))
    gxp = np.zeros((n, spatial[0] + 2 * pa, spatial[1] + 2 * pb, spatial[2] + 2 * pd, cin), dtype=gy.dtype)
    (ka, kb, kd), (sa, sb, sd), (oa, ob, od) = ksz, ctx.strides, osz
    for a in range(ka):
        for b in range(kb):
            for d in range(kd):
                gxp[
                    :,
                    a : a + sa * (oa - 1) + 1 : sa,
                    b : b + sb * (ob - 1) + 1 : sb,
                    d : d + sd * (od - 1) + 1 : sd,
                    :,
                ] += gcols[:, :, :, :, a, b, d, :]
    gx = gxp[:, pa : pa + spatial[0], pb : pb + spatial[1], pd : pd + spatial[2], :]
    return gx.reshape(ctx.x_shape), gk


# ---------------------------------------------------------------------------
# bilinear resampling
# ---------------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out x n_in) interpolation matrix, half-pixel centres (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"sizes must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_resize_2d(t: np.ndarray, new_h: int, new_w: int, axes=(-2, -1)) -> np.ndarray:
    """Resize the two ``axes`` of ``t`` to ``(new_h, new_w)``."""
    if new_h < 1 or new_w < 1:
        raise ShapeError(f"target size must be >= 1, got {(new_h, new_w)}")
    ah, aw = (_norm_axis(a, t.ndim) for a in axes)
    out = t
    if t.shape[ah] != new_h:
        out = mode_n_product(out, bilinear_matrix(t.shape[ah], new_h, t.dtype), ah)
    if t.shape[aw] != new_w:
        out = mode_n_product(out, bilinear_matrix(t.shape[aw], new_w, t.dtype), aw)
    return out if out is not t else t.copy()


# ---------------------------------------------------------------------------
# .vten binary format
# ---------------------------------------------------------------------------

VTEN_MAGIC = b"VTEN"
VTEN_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_vten(fh: BinaryIO, t: np.ndarray) -> int:
    """Write one tensor record; returns the number of bytes written."""
    dt = np.dtype(t.dtype)
    if dt not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {dt}")
    if t.ndim < 1 or t.ndim > 255:
        raise ShapeError(f"rank must be in 1..255, got {t.ndim}")
    header = VTEN_MAGIC + struct.pack("<BBB", VTEN_VERSION, _DTYPE_CODES[dt], t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=dt.newbyteorder("<")).tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_vten(fh: BinaryIO) -> np.ndarray:
    head = fh.read(7)
    if len(head) != 7 or head[:4] != VTEN_MAGIC:
        raise ValueError("not a .vten record (bad magic)")
    version, code, rank = struct.unpack("<BBB", head[4:])
    if version != VTEN_VERSION:
        raise ValueError(f"unsupported .vten version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dt = _CODE_DTYPES[code]
    nbytes = math.prod(shape) * dt.itemsize
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise ValueError("truncated .vten payload")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_vten(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_vten(fh, t)


def load_vten(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        return read_vten(fh)
