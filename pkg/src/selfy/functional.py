"""Differentiable operations recorded on a :class:`~selfy.autodiff.Tape`.

Each function takes :class:`Var` arguments (plain arrays are wrapped as
constants) and returns a new ``Var``.  Forward numerics come from
:mod:`selfy.tensor` and :mod:`selfy.stss`.
"""

from __future__ import annotations

import numpy as np

from . import stss as _stss
from . import tensor as _t
from .autodiff import Tape, Var


def _tape(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    raise ValueError("no tape attached to any argument")


def _var(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.leaf(np.asarray(x))


def add(a: Var, b: Var) -> Var:
    tape = _tape(a, b)
    a, b = _var(a, tape), _var(b, tape)
    return tape.record("add", _t.elementwise_add(a.value, b.value), (a, b), lambda g: (g, g))


def mul(a: Var, b: Var) -> Var:
    tape = _tape(a, b)
    a, b = _var(a, tape), _var(b, tape)
    if a.shape != b.shape:
        raise _t.ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return tape.record("mul", a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(a: Var, c: float) -> Var:
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0)
    # subgradient 0 at exactly 0
    return a.tape.record("relu", out, (a,), lambda g: (g * (a.value > 0),))


def sum(a: Var) -> Var:  # noqa: A001
    shape = a.shape
    return a.tape.record("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var, axes: tuple[int, ...] | None = None) -> Var:
    if axes is None:
        axes = tuple(range(a.value.ndim))
    axes = tuple(ax % a.value.ndim for ax in axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(keep) / n, shape).astype(g.dtype),)

    return a.tape.record("mean", np.asarray(a.value.mean(axis=axes)), (a,), bw)


def batch_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> tuple[Var, np.ndarray, np.ndarray]:
    """Normalise (N, C) with batch statistics; returns ``(y, batch mean, biased batch variance)``."""
    tape = _tape(x, gamma, beta)
    x, gamma, beta = _var(x, tape), _var(gamma, tape), _var(beta, tape)
    mu = x.value.mean(axis=0)
    var = x.value.var(axis=0)
    s = np.sqrt(var + eps)
    xhat = (x.value - mu) / s
    out = gamma.value * xhat + beta.value

    def bw(g):
        gm = g.mean(axis=0)
        gx = gamma.value / s * (g - gm - xhat * (g * xhat).mean(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return tape.record("batch_norm", out, (x, gamma, beta), bw), mu, var


def frozen_norm(x: Var, mean: np.ndarray, var: np.ndarray, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalise (N, C) with fixed statistics (inference form of :func:`batch_norm`)."""
    tape = _tape(x, gamma, beta)
    x, gamma, beta = _var(x, tape), _var(gamma, tape), _var(beta, tape)
    s = np.sqrt(var + eps)
    xhat = (x.value - mean) / s
    out = (gamma.value * xhat + beta.value).astype(x.dtype)

    def bw(g):
        return g * gamma.value / s, (g * xhat).sum(axis=0), g.sum(axis=0)

    return tape.record("frozen_norm", out, (x, gamma, beta), bw)


def weighted_sum(a: Var, weights: np.ndarray) -> Var:
    """``sum(a * weights)`` for a constant weight array; handy scalar probe."""
    return a.tape.record("weighted_sum", np.asarray((a.value * weights).sum()), (a,), lambda g: (g * weights,))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return a.tape.record(
        "transpose", np.ascontiguousarray(a.value.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def mode_n_product(t: Var, w: Var, axis: int) -> Var:
    tape = _tape(t, w)
    t, w = _var(t, tape), _var(w, tape)
    ax = axis % t.value.ndim
    out = _t.mode_n_product(t.value, w.value, ax)

    def bw(g):
        gm = np.moveaxis(g, ax, -1)
        tm = np.moveaxis(t.value, ax, -1)
        gt = np.moveaxis(gm @ w.value, -1, ax) if t.requires_grad else None
        gw = gm.reshape(-1, gm.shape[-1]).T @ tm.reshape(-1, tm.shape[-1]) if w.requires_grad else None
        return gt, gw

    return tape.record("mode_n_product", out, (t, w), bw)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w.T (+ b)`` over the last axis; ``w`` is (Cout, Cin)."""
    y = mode_n_product(x, w, -1)
    return y if b is None else bias_add(y, b)


def bias_add(x: Var, b: Var) -> Var:
    tape = _tape(x, b)
    x, b = _var(x, tape), _var(b, tape)
    if b.value.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise _t.ShapeError(f"bias {b.shape} does not match channels {x.shape[-1]}")
    return tape.record(
        "bias_add", x.value + b.value, (x, b), lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0))
    )


def conv3d(x: Var, k: Var, strides=(1, 1, 1), padding=(0, 0, 0)) -> Var:
    tape = _tape(x, k)
    x, k = _var(x, tape), _var(k, tape)
    if not (x.requires_grad or k.requires_grad):
        return tape.record("conv3d", _t.conv3d(x.value, k.value, strides, padding), (x, k), None)
    out, ctx = _t.conv3d(x.value, k.value, strides, padding, return_context=True)

    def bw(g):
        gx, gk = _t.conv3d_backward(g, ctx, k.value, need_input_grad=x.requires_grad)
        return gx, (gk if k.requires_grad else None)

    return tape.record("conv3d", out, (x, k), bw)


def softmax(t: Var, axis: int = -1, temperature: float = 1.0) -> Var:
    y = _t.softmax_over_axis(t.value, axis, temperature)
    return t.tape.record("softmax", y, (t,), lambda g: (_t.softmax_backward(y, g, axis, temperature),))


def bilinear_resize(t: Var, new_h: int, new_w: int, axes=(-2, -1)) -> Var:
    ah, aw = (a % t.value.ndim for a in axes)
    mh = _t.bilinear_matrix(t.shape[ah], new_h, t.dtype)
    mw = _t.bilinear_matrix(t.shape[aw], new_w, t.dtype)
    out = _t.mode_n_product(_t.mode_n_product(t.value, mh, ah), mw, aw)

    def bw(g):
        gi = _t.mode_n_product(_t.mode_n_product(g, mw.T, aw), mh.T, ah)
        return (gi,)

    return t.tape.record("bilinear_resize", out, (t,), bw)


def temporal_shift(v: Var, fraction: float, t_axis: int = -4) -> Var:
    from .backbone import temporal_shift as shift_fwd, temporal_shift_backward

    out = shift_fwd(v.value, fraction, t_axis)
    return v.tape.record(
        "temporal_shift", out, (v,), lambda g: (temporal_shift_backward(g, fraction, t_axis),)
    )


# ---------------------------------------------------------------------------
# self-similarity
# ---------------------------------------------------------------------------


def local_correlation(q: Var, k: Var, window: _stss.OffsetWindow) -> Var:
    """Windowed dot products ``q[t,x,y] . k[t+l,x+u,y+v]`` (gram kernel)."""
    tape = _tape(q, k)
    out = _stss.local_correlation_gram(q.value, k.value, window)

    def bw(g):
        gq, gk = _stss.local_correlation_gram_backward(g, q.value, k.value, window)
        return gq, gk

    return tape.record("local_correlation", out, (q, k), bw)


def l2_normalize(v: Var, eps: float = _stss.EPS) -> Var:
    vn, n = _stss.normalize(v.value, eps)
    return v.tape.record("l2_normalize", vn, (v,), lambda g: (_stss.normalize_backward(vn, n, g, eps),))


def stss_cosine(v: Var, window: _stss.OffsetWindow, eps: float = _stss.EPS) -> Var:
    vn = l2_normalize(v, eps)
    return local_correlation(vn, vn, window)


def stss_embedded_gaussian(v: Var, w_theta: Var, w_phi: Var, window: _stss.OffsetWindow) -> Var:
    """Embeddings ``v @ w_theta`` and ``v @ w_phi``; both matrices are (C, E)."""
    q = mode_n_product(v, transpose(w_theta, (1, 0)), -1)
    k = mode_n_product(v, transpose(w_phi, (1, 0)), -1)
    return local_correlation(q, k, window)


def soft_argmax(s: Var, d_u: int, d_v: int, tau: float) -> Var:
    """(..., U, V) similarity slices -> (..., 2) softmax-weighted displacement."""
    U, V = 2 * d_u + 1, 2 * d_v + 1
    if s.shape[-2:] != (U, V):
        raise _t.ShapeError(f"trailing extents {s.shape[-2:]} do not match window ({U}, {V})")
    flat = reshape(s, s.shape[:-2] + (U * V,))
    w = softmax(flat, -1, tau)
    return expected_offset(w, d_u, d_v)


def _paired_moment(p: np.ndarray, d: int) -> np.ndarray:
    # sum_i i * (p[d + i] - p[d - i]); mirror-symmetric weights give exactly 0
    out = np.zeros(p.shape[:-1], dtype=p.dtype)
    for i in range(1, d + 1):
        out += i * (p[..., d + i] - p[..., d - i])
    return out


def expected_offset(w: Var, d_u: int, d_v: int) -> Var:
    """(..., UV) weights over the window -> (..., 2) mean offset [u, v]."""
    U, V = 2 * d_u + 1, 2 * d_v + 1
    p = w.value.reshape(w.shape[:-1] + (U, V))
    out = np.stack([_paired_moment(p.sum(-1), d_u), _paired_moment(p.sum(-2), d_v)], axis=-1)
    # weights summing to 1 + ulp can push a saturated offset one ulp past the window
    np.clip(out, [-d_u, -d_v], [d_u, d_v], out=out)
    disp = displacement_matrix(d_u, d_v, w.dtype)

    def bw(g):
        return (g @ disp,)

    return w.tape.record("expected_offset", out, (w,), bw)


def displacement_matrix(d_u: int, d_v: int, dtype=np.float64) -> np.ndarray:
    """(2, UV) matrix whose columns are the offsets [u; v] in row-major (u, v) order."""
    u, v = np.meshgrid(np.arange(-d_u, d_u + 1), np.arange(-d_v, d_v + 1), indexing="ij")
    return np.stack([u.reshape(-1), v.reshape(-1)]).astype(dtype)


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n, k = z.shape
    if labels.shape != (n,):
        raise _t.ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = (lse - zs[np.arange(n), labels]).mean()

    def bw(g):
        p = np.exp(zs - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return logits.tape.record("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bw)
