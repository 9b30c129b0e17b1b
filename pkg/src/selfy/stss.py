"""Spatio-temporal self-similarity (STSS).

For a video feature map ``V`` of shape ``(T, X, Y, C)`` the transform builds
a 6D tensor ``S[t, x, y, l, u, v] = sim(V[t, x, y], V[t + l, x + u, y + v])``
over a local window of temporal offsets ``l`` and spatial offsets
``(u, v) in [-d_u, d_u] x [-d_v, d_v]``.  Targets that fall outside the clip
are 0.  Leading batch axes in front of ``T`` are allowed everywhere.

Two kernel families compute the same values:

* ``direct`` reduces over channels separately for every offset.  It is the
  reference; the tiled and thread-parallel variants follow exactly the same
  arithmetic per output element and are bit-identical to it.
* ``gram`` computes one ``(XY x XY)`` similarity matrix per frame pair with
  BLAS and gathers the window from it.  It is much faster at the small maps
  used in training and backs the differentiable op.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import ShapeError

EPS = 1e-8


@dataclass(frozen=True)
class OffsetWindow:
    temporal_offsets: tuple[int, ...]
    d_u: int
    d_v: int

    def __post_init__(self):
        offs = tuple(int(o) for o in self.temporal_offsets)
        object.__setattr__(self, "temporal_offsets", offs)
        if not offs:
            raise ValueError("temporal_offsets must be non-empty")
        if len(set(offs)) != len(offs):
            raise ValueError(f"duplicate temporal offsets in {offs}")
        if self.d_u < 0 or self.d_v < 0:
            raise ValueError(f"spatial radii must be >= 0, got ({self.d_u}, {self.d_v})")

    @classmethod
    def symmetric(cls, d_l: int, d_u: int, d_v: int | None = None) -> "OffsetWindow":
        return cls(tuple(range(-d_l, d_l + 1)), d_u, d_u if d_v is None else d_v)

    @property
    def l_count(self) -> int:
        return len(self.temporal_offsets)

    @property
    def u_count(self) -> int:
        return 2 * self.d_u + 1

    @property
    def v_count(self) -> int:
        return 2 * self.d_v + 1

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.l_count, self.u_count, self.v_count

    def describe(self) -> str:
        offs = " ".join(str(o) for o in self.temporal_offsets)
        return f"temporal_offsets = {offs}\nd_u = {self.d_u}\nd_v = {self.d_v}\n"


@dataclass(frozen=True)
class Cosine:
    eps: float = EPS


@dataclass(frozen=True)
class EmbeddedGaussian:
    """Unnormalised ``dot(a @ w_theta, b @ w_phi)``; both matrices are C x E."""

    w_theta: np.ndarray = field(repr=False)
    w_phi: np.ndarray = field(repr=False)

    @property
    def embed_dim(self) -> int:
        return self.w_theta.shape[1]


@dataclass
class StssTensor:
    values: np.ndarray
    window: OffsetWindow

    @property
    def shape(self):
        return self.values.shape


def cosine_sim(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"vector length mismatch {a.shape} vs {b.shape}")
    return float(a @ b / (max(np.linalg.norm(a), eps) * max(np.linalg.norm(b), eps)))


def normalize(v: np.ndarray, eps: float = EPS):
    """Return ``(v / max(|v|, eps), guarded norms)`` along the last axis."""
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    return v / n, n


def normalize_backward(vn: np.ndarray, n: np.ndarray, g: np.ndarray, eps: float = EPS) -> np.ndarray:
    proj = (vn * g).sum(axis=-1, keepdims=True)
    active = n > eps
    return np.where(active, (g - vn * proj) / n, g / eps)


def _embed(v: np.ndarray, kind):
    if kind is None or isinstance(kind, Cosine):
        eps = EPS if kind is None else kind.eps
        vn, _ = normalize(v, eps)
        return vn, vn
    if isinstance(kind, EmbeddedGaussian):
        if kind.w_theta.shape[0] != v.shape[-1] or kind.w_phi.shape != kind.w_theta.shape:
            raise ShapeError("embedding matrices must both be C x E")
        return v @ kind.w_theta, v @ kind.w_phi
    raise TypeError(f"unknown similarity kind {kind!r}")


def _check_input(q: np.ndarray):
    if q.ndim < 4:
        raise ShapeError(f"expected (..., T, X, Y, C), got {q.shape}")


def _ranges(n: int, off: int) -> tuple[int, int]:
    """Query index range [lo, hi) whose target ``i + off`` stays inside [0, n)."""
    return max(0, -off), min(n, n - off)


# ---------------------------------------------------------------------------
# direct kernel family
# ---------------------------------------------------------------------------


def _direct_block(q, k, out, window: OffsetWindow, xs: tuple[int, int], ys: tuple[int, int]):
    """Fill ``out[..., :, xs, ys, :, :, :]``; query positions restricted to the tile."""
    T, X, Y = q.shape[-4:-1]
    for li, l in enumerate(window.temporal_offsets):
        t0, t1 = _ranges(T, l)
        if t0 >= t1:
            continue
        for ui in range(window.u_count):
            u = ui - window.d_u
            x0, x1 = _ranges(X, u)
            x0, x1 = max(x0, xs[0]), min(x1, xs[1])
            if x0 >= x1:
                continue
            for vi in range(window.v_count):
                v = vi - window.d_v
                y0, y1 = _ranges(Y, v)
                y0, y1 = max(y0, ys[0]), min(y1, ys[1])
                if y0 >= y1:
                    continue
                prod = q[..., t0:t1, x0:x1, y0:y1, :] * k[..., t0 + l : t1 + l, x0 + u : x1 + u, y0 + v : y1 + v, :]
                out[..., t0:t1, x0:x1, y0:y1, li, ui, vi] = prod.sum(axis=-1)


def local_correlation_direct(q: np.ndarray, k: np.ndarray, window: OffsetWindow) -> np.ndarray:
    _check_input(q)
    if q.shape != k.shape:
        raise ShapeError(f"query/key shape mismatch {q.shape} vs {k.shape}")
    X, Y = q.shape[-3], q.shape[-2]
    out = np.zeros(q.shape[:-1] + window.extents, dtype=q.dtype)
    _direct_block(q, k, out, window, (0, X), (0, Y))
    return out


def _tiles(X: int, Y: int, tile: tuple[int, int]):
    tx, ty = tile
    if tx < 1 or ty < 1:
        raise ValueError(f"tile extents must be >= 1, got {tile}")
    return [
        ((x0, min(x0 + tx, X)), (y0, min(y0 + ty, Y)))
        for x0 in range(0, X, tx)
        for y0 in range(0, Y, ty)
    ]


def stripe_tile(X: int, Y: int, threads: int) -> tuple[int, int]:
    """Tile giving one full-height x-stripe per thread, so each task issues few large numpy calls."""
    return (-(-X // max(1, threads)), Y)


def local_correlation_tiled(
    q: np.ndarray,
    k: np.ndarray,
    window: OffsetWindow,
    tile: tuple[int, int] = (4, 4),
    threads: int = 1,
) -> np.ndarray:
    """Tile-blocked direct kernel; each tile owns a disjoint slab of the output."""
    _check_input(q)
    if q.shape != k.shape:
        raise ShapeError(f"query/key shape mismatch {q.shape} vs {k.shape}")
    X, Y = q.shape[-3], q.shape[-2]
    out = np.zeros(q.shape[:-1] + window.extents, dtype=q.dtype)
    tiles = _tiles(X, Y, tile)
    if threads <= 1:
        for xs, ys in tiles:
            _direct_block(q, k, out, window, xs, ys)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for fut in [pool.submit(_direct_block, q, k, out, window, xs, ys) for xs, ys in tiles]:
                fut.result()
    return out


# ---------------------------------------------------------------------------
# gram kernel family
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _window_index(X: int, Y: int, d_u: int, d_v: int) -> np.ndarray:
    """(XY, UV) flat target index per query position; ``XY`` marks out-of-bounds."""
    U, V = 2 * d_u + 1, 2 * d_v + 1
    x = np.arange(X)[:, None, None, None]
    y = np.arange(Y)[None, :, None, None]
    u = np.arange(-d_u, d_u + 1)[None, None, :, None]
    v = np.arange(-d_v, d_v + 1)[None, None, None, :]
    tx, ty = x + u, y + v
    inside = (tx >= 0) & (tx < X) & (ty >= 0) & (ty < Y)
    idx = np.where(inside, tx * Y + ty, X * Y)
    idx = idx.reshape(X * Y, U * V)
    idx.setflags(write=False)
    return idx


def local_correlation_gram(q: np.ndarray, k: np.ndarray, window: OffsetWindow) -> np.ndarray:
    _check_input(q)
    if q.shape != k.shape:
        raise ShapeError(f"query/key shape mismatch {q.shape} vs {k.shape}")
    lead = q.shape[:-4]
    T, X, Y, C = q.shape[-4:]
    P = X * Y
    L, U, V = window.extents
    qf = q.reshape((-1, T, P, C))
    kf = k.reshape((-1, T, P, C))
    N = qf.shape[0]
    idx = _window_index(X, Y, window.d_u, window.d_v)
    out = np.zeros((N, T, P, L, U * V), dtype=q.dtype)
    g = np.zeros((N, T, P, P + 1), dtype=q.dtype)
    for li, l in enumerate(window.temporal_offsets):
        t0, t1 = _ranges(T, l)
        if t0 >= t1:
            continue
        gv = g[:, : t1 - t0]
        np.matmul(qf[:, t0:t1], kf[:, t0 + l : t1 + l].swapaxes(-1, -2), out=gv[..., :P])
        out[:, t0:t1, :, li, :] = np.take_along_axis(gv, idx[None, None], axis=-1)
    return out.reshape(lead + (T, X, Y, L, U, V))


def local_correlation_gram_backward(
    gs: np.ndarray, q: np.ndarray, k: np.ndarray, window: OffsetWindow
) -> tuple[np.ndarray, np.ndarray]:
    T, X, Y, C = q.shape[-4:]
    P = X * Y
    L, U, V = window.extents
    qf = q.reshape((-1, T, P, C))
    kf = k.reshape((-1, T, P, C))
    N = qf.shape[0]
    gsf = gs.reshape((N, T, P, L, U * V))
    idx = _window_index(X, Y, window.d_u, window.d_v)
    gq = np.zeros_like(qf)
    gk = np.zeros_like(kf)
    gg = np.zeros((N, T, P, P + 1), dtype=gs.dtype)
    for li, l in enumerate(window.temporal_offsets):
        t0, t1 = _ranges(T, l)
        if t0 >= t1:
            continue
        ggv = gg[:, : t1 - t0]
        ggv.fill(0)
        # in-bounds targets are unique per query row; the spill column absorbs the rest
        np.put_along_axis(ggv, np.broadcast_to(idx, (N, t1 - t0) + idx.shape), gsf[:, t0:t1, :, li, :], axis=-1)
        dense = ggv[..., :P]
        gq[:, t0:t1] += dense @ kf[:, t0 + l : t1 + l]
        gk[:, t0 + l : t1 + l] += dense.swapaxes(-1, -2) @ qf[:, t0:t1]
    return gq.reshape(q.shape), gk.reshape(k.shape)


_KERNELS = {"direct": local_correlation_direct, "gram": local_correlation_gram}


# ---------------------------------------------------------------------------
# public transforms
# ---------------------------------------------------------------------------


def stss_transform(v: np.ndarray, window: OffsetWindow, kind=None, method: str = "direct") -> StssTensor:
    """6D self-similarity volume of ``v`` (..., T, X, Y, C)."""
    _check_input(v)
    try:
        kernel = _KERNELS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(_KERNELS)}") from None
    q, k = _embed(v, kind)
    return StssTensor(kernel(q, k, window), window)


def stss_transform_tiled(
    v: np.ndarray, window: OffsetWindow, kind=None, tile: tuple[int, int] = (4, 4), threads: int = 1
) -> StssTensor:
    _check_input(v)
    q, k = _embed(v, kind)
    return StssTensor(local_correlation_tiled(q, k, window, tile, threads), window)


def spatial_self_similarity(img: np.ndarray, window: OffsetWindow, kind=None) -> np.ndarray:
    """Per-image self-similarity (X, Y, C) -> (X, Y, U, V)."""
    if window.temporal_offsets != (0,):
        raise ValueError("spatial self-similarity needs the single temporal offset 0")
    if img.ndim != 3:
        raise ShapeError(f"expected (X, Y, C), got {img.shape}")
    return stss_transform(img[None], window, kind).values[0, :, :, 0]
