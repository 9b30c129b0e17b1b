"""Registry of differentiable ops and their finite-difference checks.

Every case builds a scalar probe ``sum(op(...) * W)`` with a fixed random
``W`` so that all output entries contribute to the gradient.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import functional as fn
from .autodiff import GradReport, gradcheck
from .backbone import BUFFERS, TinyNetConfig, init_net, init_stcb, net_forward, stcb_block
from .extraction import ConvHead, MlpHead, SoftArgmaxHead, extract, init_head
from .integration import IntegrationConfig, SelfyConfig, init_selfy, integrate_st, project_and_activate, selfy_block
from .stss import OffsetWindow


@dataclass
class Case:
    op: str
    shape_tag: str
    build: Callable[[np.random.Generator], tuple[Callable, dict]]


def _probe(out, seed=99):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return fn.weighted_sum(out, w)


def _unary(op):
    def build_for(shape):
        def build(rng):
            return (lambda tape, x: _probe(op(x))), {"x": rng.standard_normal(shape)}

        return build

    return build_for


def _conv(x_shape, k_shape, strides, padding):
    def build(rng):
        f = lambda tape, x, k: _probe(fn.conv3d(x, k, strides, padding))
        return f, {"x": rng.standard_normal(x_shape), "k": rng.standard_normal(k_shape)}

    return build


def _mode_n(shape, axis, cout):
    def build(rng):
        f = lambda tape, t, w: _probe(fn.mode_n_product(t, w, axis))
        return f, {"t": rng.standard_normal(shape), "w": rng.standard_normal((cout, shape[axis]))}

    return build


def _binary(op, shape):
    def build(rng):
        return (lambda tape, a, b: _probe(op(a, b))), {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)}

    return build


def _softmax(shape, axis, tau):
    def build(rng):
        return (lambda tape, x: _probe(fn.softmax(x, axis, tau))), {"x": rng.standard_normal(shape)}

    return build


def _resize(shape, h, w):
    def build(rng):
        return (lambda tape, x: _probe(fn.bilinear_resize(x, h, w, axes=(1, 2)))), {"x": rng.standard_normal(shape)}

    return build


def _stss(shape, window):
    def build(rng):
        return (lambda tape, v: _probe(fn.stss_cosine(v, window))), {"v": rng.standard_normal(shape)}

    return build


def _stss_eg(shape, window, e):
    def build(rng):
        c = shape[-1]
        f = lambda tape, v, wt, wp: _probe(fn.stss_embedded_gaussian(v, wt, wp, window))
        return f, {"v": rng.standard_normal(shape), "w_theta": rng.standard_normal((c, e)), "w_phi": rng.standard_normal((c, e))}

    return build


def _head(head, window, lead):
    def build(rng):
        params = init_head(head, window, rng, np.float64, prefix="h")
        names = list(params)

        def f(tape, s, *ws):
            return _probe(extract(head, dict(zip(names, ws)), s, window, prefix="h"))

        inputs = {"s": rng.uniform(-1, 1, lead + window.extents)}
        inputs.update(params)
        return f, inputs

    return build


def _integrate(shape, cin_couts, kernel):
    def build(rng):
        pad = tuple(k // 2 for k in kernel)
        ks = {f"k{i}": rng.standard_normal(tuple(kernel) + (ci, co)) * 0.5 for i, (ci, co) in enumerate(cin_couts)}

        def f(tape, x, *kernels):
            return _probe(integrate_st(x, list(kernels), pad))

        return f, {"f": rng.standard_normal(shape), **ks}

    return build


def _project(shape, c):
    def build(rng):
        L, cs = shape[-2:]
        f = lambda tape, x, w: _probe(project_and_activate(x, w))
        return f, {"fstar": rng.standard_normal(shape), "w_theta": rng.standard_normal((c, L * cs))}

    return build


def _active(params, rng):
    """Positive-mean weights: most ReLUs stay live, so no tested gradient is
    dominated by the rounding noise of the finite differences."""
    return {k: np.abs(v) * rng.choice([-0.3, 1.0], size=v.shape) for k, v in params.items()}


def _block(cfg: SelfyConfig, shape):
    def build(rng):
        params = _active(init_selfy(cfg, shape[-1], rng, np.float64), rng)
        names = list(params)

        def f(tape, v, *ws):
            return _probe(selfy_block(v, dict(zip(names, ws)), cfg))

        return f, {"v": rng.standard_normal(shape), **params}

    return build


def _stcb(cfg: SelfyConfig, shape):
    def build(rng):
        params = init_stcb(cfg, shape[-1], rng, np.float64)
        names = list(params)

        def f(tape, v, *ws):
            return _probe(stcb_block(v, dict(zip(names, ws)), cfg))

        return f, {"v": rng.standard_normal(shape), **params}

    return build


def _norm(shape, frozen):
    def build(rng):
        mean, var = rng.standard_normal(shape[1:]), rng.uniform(0.5, 2.0, shape[1:])
        if frozen:
            f = lambda tape, x, g, b: _probe(fn.frozen_norm(x, mean, var, g, b))
        else:
            f = lambda tape, x, g, b: _probe(fn.batch_norm(x, g, b)[0])
        return f, {"x": rng.standard_normal(shape), "gamma": rng.uniform(0.5, 2.0, shape[1:]), "beta": rng.standard_normal(shape[1:])}

    return build


def _net(cfg: TinyNetConfig, n, training=False):
    def build(rng):
        params = init_net(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        params.update(_active({k: v for k, v in params.items() if not k.startswith(("stage", "fc", "pool_bn"))}, rng))
        params["fc.w"] = rng.standard_normal(params["fc.w"].shape)
        # positive biases keep every feature vector away from 0, where the
        # eps-guarded cosine is discontinuous and differences are meaningless
        for k in params:
            if k.endswith(".b") and k.startswith("stage"):
                params[k] = rng.uniform(0.5, 1.0, params[k].shape)
        # running statistics are constants, not differentiated inputs
        buffers = {k: params.pop(k) for k in BUFFERS if k in params}
        names = list(params)

        def f(tape, clip, *ws):
            pv = dict(zip(names, ws))
            pv.update({k: tape.leaf(v) for k, v in buffers.items()})
            return _probe(net_forward(cfg, pv, clip, {} if training else None))

        return f, {"clip": rng.standard_normal((n, cfg.frames, cfg.size, cfg.size, 3)), **params}

    return build


def _ce(n, k):
    def build(rng):
        labels = rng.integers(k, size=n)
        return (lambda tape, z: fn.cross_entropy(z, labels)), {"logits": rng.standard_normal((n, k))}

    return build


def _shift(shape, frac):
    def build(rng):
        return (lambda tape, x: _probe(fn.temporal_shift(x, frac))), {"x": rng.standard_normal(shape)}

    return build


def _small_selfy(**kw) -> SelfyConfig:
    base = SelfyConfig(
        window=OffsetWindow.symmetric(1, 1),
        head=ConvHead(channels=(3, 4)),
        integration=IntegrationConfig(layers=2),
        stss_resolution=4,
    )
    return replace(base, **kw)


W3 = OffsetWindow.symmetric(1, 1)
W_ASYM = OffsetWindow((1, -2), 2, 1)
W9 = OffsetWindow.symmetric(2, 4)

CASES: list[Case] = [
    Case("elementwise_add", "(3,4)", _binary(fn.add, (3, 4))),
    Case("elementwise_add", "(2,3,5)", _binary(fn.add, (2, 3, 5))),
    Case("relu", "(4,5)", _unary(fn.relu)((4, 5))),
    Case("relu", "(2,3,3,2)", _unary(fn.relu)((2, 3, 3, 2))),
    Case("mode_n_product", "(2,3,4) axis 2", _mode_n((2, 3, 4), 2, 5)),
    Case("mode_n_product", "(3,4,2,5) axis 1", _mode_n((3, 4, 2, 5), 1, 3)),
    Case("conv3d", "1x4x4 k1x3x3 s2 p1", _conv((2, 1, 4, 4, 2), (1, 3, 3, 2, 3), (1, 2, 2), (0, 1, 1))),
    Case("conv3d", "3x5x4 k3x3x2 s1 p1", _conv((1, 3, 5, 4, 2), (3, 3, 2, 2, 2), (1, 1, 1), (1, 1, 0))),
    Case("conv3d", "im2col path", _conv((1, 4, 12, 12, 8), (1, 3, 3, 8, 12), (1, 1, 1), (0, 1, 1))),
    Case("softmax", "(3,9) tau 1", _softmax((3, 9), -1, 1.0)),
    Case("softmax", "(2,5,4) axis 1 tau 0.3", _softmax((2, 5, 4), 1, 0.3)),
    Case("bilinear_resize", "6x6 -> 3x3", _resize((2, 6, 6, 2), 3, 3)),
    Case("bilinear_resize", "3x4 -> 5x7", _resize((1, 3, 4, 3), 5, 7)),
    Case("temporal_shift", "(4,2,2,8)", _shift((4, 2, 2, 8), 0.25)),
    Case("temporal_shift", "(2,3,3,5,6)", _shift((2, 3, 3, 5, 6), 0.5)),
    Case("batch_norm", "(6,4)", _norm((6, 4), False)),
    Case("batch_norm", "(3,7)", _norm((3, 7), False)),
    Case("frozen_norm", "(5,3)", _norm((5, 3), True)),
    Case("frozen_norm", "(2,6)", _norm((2, 6), True)),
    Case("cross_entropy", "(4,9)", _ce(4, 9)),
    Case("cross_entropy", "(7,3)", _ce(7, 3)),
    Case("stss_transform", "(3,4,4,2) w(-1..1,1,1)", _stss((3, 4, 4, 2), W3)),
    Case("stss_transform", "(2,3,5,3) w({1,-2},2,1)", _stss((2, 3, 5, 3), W_ASYM)),
    Case("stss_embedded_gaussian", "(3,4,4,3) e2", _stss_eg((3, 4, 4, 3), W3, 2)),
    Case("stss_embedded_gaussian", "(2,3,3,2) e3", _stss_eg((2, 3, 3, 2), W_ASYM, 3)),
    Case("soft_argmax", "tau 1 (2,2,3,3,3)", _head(SoftArgmaxHead(1.0), W3, (2, 2))),
    Case("soft_argmax", "tau 0.2 (3,2,5,3)", _head(SoftArgmaxHead(0.2), W_ASYM, (3,))),
    Case("mlp_extract", "9->5->4", _head(MlpHead((5, 4)), W3, (2, 2))),
    Case("mlp_extract", "15->6->3->2", _head(MlpHead((6, 3, 2)), W_ASYM, (3,))),
    Case("conv_extract", "3x3 window", _head(ConvHead((3, 4)), W3, (2, 2))),
    Case("conv_extract", "9x9 default schedule", _head(ConvHead((2, 3, 3, 4)), W9, (2,))),
    Case("integrate_st", "1x3x3 kernels", _integrate((1, 2, 3, 3, 2, 3), [(3, 3), (3, 2)], (1, 3, 3))),
    Case("integrate_st", "3x3x3 kernel", _integrate((2, 3, 3, 2, 3, 2), [(2, 3)], (3, 3, 3))),
    Case("project_and_activate", "(2,3,3,2,4)->5", _project((1, 2, 3, 3, 2, 4), 5)),
    Case("project_and_activate", "(3,2,2,3,2)->3", _project((2, 3, 2, 2, 3, 2), 3)),
    Case("selfy_block", "cosine conv head", _block(_small_selfy(), (1, 3, 4, 4, 3))),
    Case("selfy_block", "resized, embedded gaussian", _block(_small_selfy(similarity="embedded_gaussian", embed_dim=2), (1, 2, 6, 6, 3))),
    Case("selfy_block", "mlp head", _block(_small_selfy(head=MlpHead((4, 3))), (1, 2, 3, 3, 2))),
    Case("selfy_block", "soft-argmax head", _block(_small_selfy(head=SoftArgmaxHead(0.5)), (1, 3, 3, 3, 2))),
    Case("stcb_block", "(1,3,5,5,4)", _stcb(_small_selfy(window=OffsetWindow.symmetric(1, 2)), (1, 3, 5, 5, 4))),
    Case("stcb_block", "(2,2,4,6,4)", _stcb(_small_selfy(window=OffsetWindow.symmetric(1, 2)), (2, 2, 4, 6, 4))),
    Case(
        "net_forward",
        "tsm + selfy",
        _net(TinyNetConfig(stages=((3, 1), (4, 2), (4, 1)), use_tsm=True, size=6, frames=3, classes=3, selfy=_small_selfy()), 2),
    ),
    Case(
        "net_forward",
        "pooled batch norm, training mode",
        _net(TinyNetConfig(stages=((3, 1), (4, 2), (4, 1)), size=6, frames=3, classes=3, selfy=_small_selfy(), pool_norm="batch"), 4, training=True),
    ),
    Case(
        "net_forward",
        "pooled batch norm, inference mode",
        _net(TinyNetConfig(stages=((3, 1), (4, 2), (4, 1)), size=6, frames=3, classes=3, selfy=_small_selfy(), pool_norm="batch"), 2),
    ),
    Case(
        "net_forward",
        "stcb",
        _net(TinyNetConfig(stages=((3, 1), (4, 2), (4, 1)), block="stcb", size=6, frames=3, classes=3, selfy=_small_selfy(window=OffsetWindow.symmetric(1, 2))), 2),
    ),
]

OPS = tuple(dict.fromkeys(c.op for c in CASES))


@dataclass
class CaseResult:
    case: Case
    report: GradReport


def run_suite(ops=None, tol: float = 1e-6, n_coords: int = 64, seed: int = 0, cases=None) -> list[CaseResult]:
    cases = CASES if cases is None else cases
    if ops:
        unknown = set(ops) - {c.op for c in cases}
        if unknown:
            raise KeyError(f"unknown op(s): {', '.join(sorted(unknown))}")
        cases = [c for c in cases if c.op in ops]
    results = []
    for case in cases:
        # per-case stream: adding or filtering cases never changes another case's inputs
        rng = np.random.default_rng([seed, zlib.crc32(f"{case.op}/{case.shape_tag}".encode())])
        f, inputs = case.build(rng)
        results.append(CaseResult(case, gradcheck(f, inputs, tol=tol, n_coords=n_coords, seed=seed)))
    return results


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'op':<24} {'shape':<30} {'max_rel_err':>12}  status"]
    for r in results:
        status = "ok" if r.report.passed else "FAIL"
        lines.append(f"{r.case.op:<24} {r.case.shape_tag:<30} {r.report.worst:12.3e}  {status}")
    return "\n".join(lines)


def broken_relu_case() -> Case:
    """Negative control: a ReLU whose backward passes the gradient through unmasked."""

    def bad_relu(a):
        import numpy as _np

        return a.tape.record("relu", _np.maximum(a.value, 0), (a,), lambda g: (g,))

    return Case("broken_relu", "(4,5)", _unary(bad_relu)((4, 5)))
