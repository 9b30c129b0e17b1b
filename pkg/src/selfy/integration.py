"""Feature integration and the residual SELFY block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as fn
from .autodiff import Tape, Var
from .extraction import ConvHead, Head, extract, he_normal, init_head
from .stss import OffsetWindow
from .tensor import ConfigError


@dataclass(frozen=True)
class IntegrationConfig:
    """Spatio-temporal (t, x, y) convolutions applied per temporal offset.

    ``channels`` lists the output width of each layer; ``None`` entries keep
    the input width (so the default stack preserves C_F).
    """

    layers: int = 4
    kernel: tuple[int, int, int] = (1, 3, 3)
    channels: tuple[int, ...] | None = None

    def widths(self, c_f: int) -> tuple[int, ...]:
        if self.channels is None:
            return (c_f,) * self.layers
        if len(self.channels) != self.layers:
            raise ConfigError(f"{len(self.channels)} integration widths for {self.layers} layers")
        return tuple(self.channels)

    @property
    def padding(self) -> tuple[int, int, int]:
        for k in self.kernel:
            if k % 2 == 0:
                raise ConfigError(f"integration kernel {self.kernel} must have odd extents for same padding")
        return tuple(k // 2 for k in self.kernel)


@dataclass(frozen=True)
class SelfyConfig:
    window: OffsetWindow = field(default_factory=lambda: OffsetWindow.symmetric(2, 4))
    similarity: str = "cosine"
    embed_dim: int = 32
    head: Head = field(default_factory=ConvHead)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    stss_resolution: int = 14
    enabled: bool = True

    def __post_init__(self):
        if self.similarity not in ("cosine", "embedded_gaussian"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.stss_resolution < 1:
            raise ConfigError("stss_resolution must be >= 1")

    def c_f(self) -> int:
        return self.head.out_channels(self.window)

    def c_star(self) -> int:
        widths = self.integration.widths(self.c_f())
        return widths[-1] if widths else self.c_f()


def init_selfy(cfg: SelfyConfig, channels: int, rng: np.random.Generator, dtype=np.float32, prefix="selfy") -> dict:
    """Parameters for one block on a ``channels``-wide feature map."""
    params = {}
    if cfg.similarity == "embedded_gaussian":
        params[f"{prefix}.w_theta"] = he_normal(rng, (channels, cfg.embed_dim), channels, dtype)
        params[f"{prefix}.w_phi"] = he_normal(rng, (channels, cfg.embed_dim), channels, dtype)
    params.update(init_head(cfg.head, cfg.window, rng, dtype, prefix=f"{prefix}.head"))
    cin = cfg.c_f()
    kt, kx, ky = cfg.integration.kernel
    for i, cout in enumerate(cfg.integration.widths(cin)):
        params[f"{prefix}.integ.k{i}"] = he_normal(rng, (kt, kx, ky, cin, cout), kt * kx * ky * cin, dtype)
        cin = cout
    width = cfg.window.l_count * cin
    params[f"{prefix}.w_theta_proj"] = he_normal(rng, (channels, width), width, dtype)
    return params


def integrate_st(f: Var, kernels: list[Var], padding=(0, 1, 1)) -> Var:
    """(N, T, X, Y, L, C) -> (N, T, X, Y, L, C*): ReLU(conv) over (t, x, y) per offset."""
    if not kernels:
        return f
    x = fn.transpose(f, (0, 4, 1, 2, 3, 5))
    for k in kernels:
        if k.shape[3] != x.shape[-1]:
            raise ConfigError(f"integration kernel expects {k.shape[3]} channels, gets {x.shape[-1]}")
        x = fn.relu(fn.conv3d(x, k, (1, 1, 1), padding))
    return fn.transpose(x, (0, 2, 3, 4, 1, 5))


def project_and_activate(fstar: Var, w_theta: Var) -> Var:
    """Flatten (L, C*) and project to the backbone width: ReLU(F* x_4 W_theta)."""
    lead = fstar.shape[:-2]
    flat = fn.reshape(fstar, lead + (fstar.shape[-2] * fstar.shape[-1],))
    if w_theta.shape[1] != flat.shape[-1]:
        raise ConfigError(f"projection expects width {w_theta.shape[1]}, gets {flat.shape[-1]}")
    return fn.relu(fn.mode_n_product(flat, w_theta, -1))


def selfy_block(v: Var, params: dict[str, Var], cfg: SelfyConfig, prefix="selfy") -> Var:
    """Residual SELFY block on (N, T, X, Y, C) features."""
    if v.value.ndim != 5:
        raise ConfigError(f"expected (N, T, X, Y, C) input, got {v.shape}")
    X, Y = v.shape[2], v.shape[3]
    r = cfg.stss_resolution
    resized = X > r or Y > r
    x = fn.bilinear_resize(v, min(X, r), min(Y, r), axes=(2, 3)) if resized else v
    if cfg.similarity == "cosine":
        s = fn.stss_cosine(x, cfg.window)
    else:
        s = fn.stss_embedded_gaussian(x, params[f"{prefix}.w_theta"], params[f"{prefix}.w_phi"], cfg.window)
    f = extract(cfg.head, params, s, cfg.window, prefix=f"{prefix}.head")
    kernels = [params[f"{prefix}.integ.k{i}"] for i in range(cfg.integration.layers)]
    fstar = integrate_st(f, kernels, cfg.integration.padding)
    z = project_and_activate(fstar, params[f"{prefix}.w_theta_proj"])
    if resized:
        z = fn.bilinear_resize(z, X, Y, axes=(2, 3))
    return fn.add(v, z)


def selfy_block_forward(v: np.ndarray, params: dict[str, np.ndarray], cfg: SelfyConfig, prefix="selfy") -> np.ndarray:
    """Array-level forward pass; accepts (T, X, Y, C) or (N, T, X, Y, C)."""
    single = v.ndim == 4
    tape = Tape()
    pv = {k: tape.leaf(a) for k, a in params.items()}
    out = selfy_block(tape.leaf(v[None] if single else v), pv, cfg, prefix)
    return out.value[0] if single else out.value


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))
