"""Feature extraction heads: (..., L, U, V) similarity volume -> (..., L, C_F)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import functional as fn
from .autodiff import Tape, Var
from .stss import OffsetWindow, StssTensor
from .tensor import ConfigError


@dataclass(frozen=True)
class SoftArgmaxHead:
    tau: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"soft-argmax temperature must be positive, got {self.tau}")

    def out_channels(self, window: OffsetWindow) -> int:
        return 2


@dataclass(frozen=True)
class MlpHead:
    widths: tuple[int, ...] = (64, 64, 64, 64)

    def out_channels(self, window: OffsetWindow) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class ConvLayer:
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    pad: tuple[int, int, int]
    cin: int
    cout: int


@dataclass(frozen=True)
class ConvHead:
    """Stack of (l, u, v) convolutions that shrinks (U, V) to (1, 1).

    ``layers`` overrides the derived schedule entirely.
    """

    channels: tuple[int, ...] = (16, 32, 64, 64)
    layers: tuple[ConvLayer, ...] | None = None

    def schedule(self, window: OffsetWindow) -> tuple[ConvLayer, ...]:
        if self.layers is not None:
            sched = self.layers
        else:
            sched = default_conv_schedule(window.u_count, window.v_count, self.channels)
        check_conv_schedule(sched, window)
        return sched

    def out_channels(self, window: OffsetWindow) -> int:
        return self.schedule(window)[-1].cout


Head = Union[SoftArgmaxHead, MlpHead, ConvHead]


def _axis_steps(n: int) -> list[tuple[int, int, int]]:
    """(kernel, stride, pad) per layer taking extent ``n`` down to 1."""
    if n == 1:
        return [(1, 1, 0)]
    steps = [(3, 1, 1)]
    e = n
    while e > 3:
        steps.append((3, 2, 1))
        e = (e - 1) // 2 + 1
    steps.append((e, 1, 0))
    return steps


def default_conv_schedule(u_count: int, v_count: int, channels=(16, 32, 64, 64)) -> tuple[ConvLayer, ...]:
    """Keep the first layer at full resolution, halve to 3, finish with a valid conv.

    For a 9x9 window this is four 1x3x3 layers with strides 1, 2, 2, 1 and
    paddings 1, 1, 1, 0 (9 -> 9 -> 5 -> 3 -> 1).
    """
    su, sv = _axis_steps(u_count), _axis_steps(v_count)
    n = max(len(su), len(sv))
    su = [(1, 1, 0)] * (n - len(su)) + su
    sv = [(1, 1, 0)] * (n - len(sv)) + sv
    channels = tuple(channels)
    if len(channels) >= n:
        chans = channels[len(channels) - n :]
    else:
        chans = (channels[0],) * (n - len(channels)) + channels
    layers, cin = [], 1
    for (ku, stu, pu), (kv, stv, pv), cout in zip(su, sv, chans):
        layers.append(ConvLayer((1, ku, kv), (1, stu, stv), (0, pu, pv), cin, cout))
        cin = cout
    return tuple(layers)


def check_conv_schedule(layers, window: OffsetWindow) -> None:
    L, U, V = window.extents
    cin = 1
    for i, layer in enumerate(layers):
        if layer.cin != cin:
            raise ConfigError(f"conv layer {i} expects {layer.cin} input channels, gets {cin}")
        ext = []
        for n, k, s, p in zip((L, U, V), layer.kernel, layer.stride, layer.pad):
            if n + 2 * p < k:
                raise ConfigError(f"conv layer {i} kernel {layer.kernel} larger than padded input")
            ext.append((n + 2 * p - k) // s + 1)
        L, U, V = ext
        cin = layer.cout
    if (U, V) != (1, 1):
        raise ConfigError(f"conv schedule ends at (U, V) = ({U}, {V}), not (1, 1)")
    if L != window.l_count:
        raise ConfigError(f"conv schedule changes the L extent {window.l_count} -> {L}")


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_head(head: Head, window: OffsetWindow, rng: np.random.Generator, dtype=np.float32, prefix="head") -> dict:
    params = {}
    if isinstance(head, SoftArgmaxHead):
        return params
    if isinstance(head, MlpHead):
        cin = window.u_count * window.v_count
        for i, cout in enumerate(head.widths):
            params[f"{prefix}.w{i}"] = he_normal(rng, (cout, cin), cin, dtype)
            cin = cout
        return params
    if isinstance(head, ConvHead):
        for i, layer in enumerate(head.schedule(window)):
            shape = tuple(layer.kernel) + (layer.cin, layer.cout)
            params[f"{prefix}.k{i}"] = he_normal(rng, shape, int(np.prod(shape[:4])), dtype)
        return params
    raise TypeError(f"unknown head {head!r}")


def extract(head: Head, params: dict[str, Var], s: Var, window: OffsetWindow, prefix="head") -> Var:
    """Apply ``head`` to ``s`` of shape (..., L, U, V); returns (..., L, C_F)."""
    L, U, V = window.extents
    if s.shape[-3:] != (L, U, V):
        raise ConfigError(f"STSS trailing extents {s.shape[-3:]} do not match window {(L, U, V)}")
    if isinstance(head, SoftArgmaxHead):
        return fn.soft_argmax(s, window.d_u, window.d_v, head.tau)
    if isinstance(head, MlpHead):
        x = fn.reshape(s, s.shape[:-2] + (U * V,))
        for i in range(len(head.widths)):
            w = params[f"{prefix}.w{i}"]
            if w.shape[1] != x.shape[-1]:
                raise ConfigError(f"mlp layer {i} expects width {w.shape[1]}, gets {x.shape[-1]}")
            x = fn.relu(fn.mode_n_product(x, w, -1))
        return x
    if isinstance(head, ConvHead):
        lead = s.shape[:-3]
        x = fn.reshape(s, (-1, L, U, V, 1))
        for i, layer in enumerate(head.schedule(window)):
            x = fn.relu(fn.conv3d(x, params[f"{prefix}.k{i}"], layer.stride, layer.pad))
        return fn.reshape(x, lead + (L, x.shape[-1]))
    raise TypeError(f"unknown head {head!r}")


# ---------------------------------------------------------------------------
# array-level entry points
# ---------------------------------------------------------------------------


@dataclass
class ExtractedFeatures:
    values: np.ndarray
    head_kind: str


def _run(head: Head, weights: dict[str, np.ndarray], s: StssTensor, kind: str) -> ExtractedFeatures:
    tape = Tape()
    pv = {k: tape.leaf(v) for k, v in weights.items()}
    out = extract(head, pv, tape.leaf(s.values), s.window)
    return ExtractedFeatures(out.value, kind)


def soft_argmax(s: StssTensor, tau: float = 0.01) -> ExtractedFeatures:
    return _run(SoftArgmaxHead(tau), {}, s, "soft_argmax")


def mlp_extract(s: StssTensor, weights: list[np.ndarray]) -> ExtractedFeatures:
    """``weights[i]`` is (C_out, C_in); the first C_in is U*V."""
    head = MlpHead(tuple(w.shape[0] for w in weights))
    return _run(head, {f"head.w{i}": w for i, w in enumerate(weights)}, s, "mlp")


def conv_extract(s: StssTensor, kernels: list[np.ndarray], layers: tuple[ConvLayer, ...] | None = None) -> ExtractedFeatures:
    """``kernels[i]`` is (kL, kU, kV, C_in, C_out); ``layers`` defaults to the derived schedule."""
    if layers is None:
        layers = default_conv_schedule(s.window.u_count, s.window.v_count, tuple(k.shape[-1] for k in kernels))
    if len(layers) != len(kernels):
        raise ConfigError(f"{len(kernels)} kernels for a {len(layers)}-layer schedule")
    for i, (layer, k) in enumerate(zip(layers, kernels)):
        if tuple(k.shape) != tuple(layer.kernel) + (layer.cin, layer.cout):
            raise ConfigError(f"kernel {i} has shape {k.shape}, schedule wants {layer}")
    head = ConvHead(channels=tuple(k.shape[-1] for k in kernels), layers=tuple(layers))
    return _run(head, {f"head.k{i}": k for i, k in enumerate(kernels)}, s, "conv")
