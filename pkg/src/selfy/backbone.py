"""Tiny per-frame CNN that hosts a SELFY or STCB block, plus checkpoint I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import functional as fn
from .autodiff import Tape, Var
from .extraction import he_normal
from .integration import SelfyConfig, count_params, init_selfy, selfy_block
from .tensor import ConfigError, ShapeError, read_vten, write_vten

BLOCKS = ("selfy", "stcb", "none")
POOL_NORMS = ("none", "batch")


# ---------------------------------------------------------------------------
# temporal shift
# ---------------------------------------------------------------------------


def shift_fold(channels: int, fraction: float) -> int:
    if not 0 < fraction <= 0.5:
        raise ConfigError(f"shift fraction must be in (0, 1/2], got {fraction}")
    return int(math.floor(fraction * channels))


def temporal_shift(v: np.ndarray, fraction: float = 0.25, t_axis: int = -4) -> np.ndarray:
    """Move the first fold of channels forward one frame and the next fold backward.

    Frames shifted in from outside the clip are zero.
    """
    fold = shift_fold(v.shape[-1], fraction)
    if fold == 0:
        return v.copy()
    x = np.moveaxis(v, t_axis, 0)
    out = np.zeros_like(x)
    out[1:, ..., :fold] = x[:-1, ..., :fold]
    out[:-1, ..., fold : 2 * fold] = x[1:, ..., fold : 2 * fold]
    out[..., 2 * fold :] = x[..., 2 * fold :]
    return np.moveaxis(out, 0, t_axis)


def temporal_shift_backward(g: np.ndarray, fraction: float = 0.25, t_axis: int = -4) -> np.ndarray:
    fold = shift_fold(g.shape[-1], fraction)
    if fold == 0:
        return g.copy()
    x = np.moveaxis(g, t_axis, 0)
    out = np.zeros_like(x)
    out[:-1, ..., :fold] = x[1:, ..., :fold]
    out[1:, ..., fold : 2 * fold] = x[:-1, ..., fold : 2 * fold]
    out[..., 2 * fold :] = x[..., 2 * fold :]
    return np.moveaxis(out, 0, t_axis)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TinyNetConfig:
    stages: tuple[tuple[int, int], ...] = ((16, 1), (32, 2), (64, 2))
    use_tsm: bool = False
    tsm_fraction: float = 0.25
    block: str = "selfy"
    classes: int = 9
    frames: int = 8
    size: int = 32
    in_channels: int = 3
    selfy: SelfyConfig = field(default_factory=SelfyConfig)
    pool_norm: str = "none"  # "batch": batch-normalise pooled features before the classifier
    input_mean: float = 0.0  # clips enter the stem as (x - input_mean) / input_std
    input_std: float = 1.0

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ConfigError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.pool_norm not in POOL_NORMS:
            raise ConfigError(f"pool_norm must be one of {POOL_NORMS}, got {self.pool_norm!r}")
        if len(self.stages) < 3 and self.block != "none":
            raise ConfigError("a block is inserted after the third stage; need at least 3 stages")
        for c, s in self.stages:
            if c < 1 or s < 1:
                raise ConfigError(f"illegal stage (channels={c}, stride={s})")
        if self.use_tsm:
            shift_fold(1, self.tsm_fraction)
        if not self.input_std > 0:
            raise ConfigError(f"input_std must be positive, got {self.input_std}")
        if self.classes < 1 or self.frames < 1 or self.size < 1:
            raise ConfigError("classes, frames and size must be positive")

    @property
    def block_channels(self) -> int:
        return self.stages[min(2, len(self.stages) - 1)][0]

    def feature_size(self, stage: int) -> int:
        n = self.size
        for _, s in self.stages[: stage + 1]:
            n = (n + 2 - 3) // s + 1
        return n


# ---------------------------------------------------------------------------
# STCB
# ---------------------------------------------------------------------------


def selfy_s_config(cfg: SelfyConfig) -> SelfyConfig:
    """SELFY without the integration convolutions (extraction + projection only)."""
    return replace(cfg, integration=replace(cfg.integration, layers=0, channels=None))


def stcb_kernels(cfg: SelfyConfig) -> list[tuple[int, int, int]]:
    """Kernel extents whose stacked receptive field covers the SELFY window."""
    offs = cfg.window.temporal_offsets
    t_span = max(max(offs), 0) - min(min(offs), 0) + 1
    n_t = math.ceil((t_span - 1) / 2)
    n = max(n_t, cfg.window.d_u, cfg.window.d_v, 1)
    return [
        (3 if i < n_t else 1, 3 if i < cfg.window.d_u else 1, 3 if i < cfg.window.d_v else 1)
        for i in range(n)
    ]


def _stcb_count(kernels, channels: int, hidden: int) -> int:
    total, cin = 0, channels
    for i, k in enumerate(kernels):
        cout = channels if i == len(kernels) - 1 else hidden
        total += int(np.prod(k)) * cin * cout
        cin = cout
    return total


def stcb_width(cfg: SelfyConfig, channels: int) -> tuple[int, int, int]:
    """Hidden width matching SELFY-s parameters; returns ``(width, stcb_count, selfy_s_count)``."""
    target = count_params(init_selfy(selfy_s_config(cfg), channels, np.random.default_rng(0)))
    kernels = stcb_kernels(cfg)
    best = min(range(1, 4097), key=lambda h: abs(_stcb_count(kernels, channels, h) - target))
    got = _stcb_count(kernels, channels, best)
    if abs(got - target) > 0.1 * target:
        raise ConfigError(
            f"no STCB width within 10% of SELFY-s parameter count {target} (closest {got} at width {best})"
        )
    return best, got, target


def init_stcb(cfg: SelfyConfig, channels: int, rng: np.random.Generator, dtype=np.float32, prefix="stcb") -> dict:
    width, _, _ = stcb_width(cfg, channels)
    kernels = stcb_kernels(cfg)
    params, cin = {}, channels
    for i, k in enumerate(kernels):
        cout = channels if i == len(kernels) - 1 else width
        params[f"{prefix}.k{i}"] = he_normal(rng, tuple(k) + (cin, cout), int(np.prod(k)) * cin, dtype)
        cin = cout
    return params


def stcb_block(v: Var, params: dict[str, Var], cfg: SelfyConfig, prefix="stcb") -> Var:
    """Residual stack of ReLU spatio-temporal convolutions on (N, T, X, Y, C)."""
    x = v
    for i, k in enumerate(stcb_kernels(cfg)):
        x = fn.relu(fn.conv3d(x, params[f"{prefix}.k{i}"], (1, 1, 1), tuple(e // 2 for e in k)))
    return fn.add(v, x)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def init_net(cfg: TinyNetConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    cin = cfg.in_channels
    for i, (c, _) in enumerate(cfg.stages):
        params[f"stage{i}.k"] = he_normal(rng, (1, 3, 3, cin, c), 9 * cin, dtype)
        params[f"stage{i}.b"] = np.zeros(c, dtype=dtype)
        cin = c
    if cfg.block == "selfy":
        params.update(init_selfy(cfg.selfy, cfg.block_channels, rng, dtype))
    elif cfg.block == "stcb":
        params.update(init_stcb(cfg.selfy, cfg.block_channels, rng, dtype))
    if cfg.pool_norm == "batch":
        params["pool_bn.gamma"] = np.ones(cin, dtype=dtype)
        params["pool_bn.beta"] = np.zeros(cin, dtype=dtype)
        params["pool_bn.mean"] = np.zeros(cin, dtype=dtype)
        params["pool_bn.var"] = np.ones(cin, dtype=dtype)
    # zero classifier: the first loss is exactly log(classes)
    params["fc.w"] = np.zeros((cfg.classes, cin), dtype=dtype)
    params["fc.b"] = np.zeros(cfg.classes, dtype=dtype)
    return params


# running statistics are state, not trained: the optimiser never sees a gradient for them
BUFFERS = ("pool_bn.mean", "pool_bn.var")


def standardize_input(cfg: TinyNetConfig, clip: Var) -> Var:
    """(x - input_mean) / input_std; a no-op at the defaults."""
    if cfg.input_mean == 0.0 and cfg.input_std == 1.0:
        return clip
    shift = clip.tape.leaf(np.full(cfg.in_channels, -cfg.input_mean, dtype=clip.dtype))
    return fn.scale(fn.bias_add(clip, shift), 1.0 / cfg.input_std)


def net_forward(cfg: TinyNetConfig, params: dict[str, Var], clip: Var, batch_stats: dict | None = None) -> Var:
    """(N, T, H, W, 3) clips -> (N, classes) logits.

    With ``pool_norm == "batch"``, passing a ``batch_stats`` dict selects
    training mode: batch statistics normalise the pooled features and are
    stored in the dict.  Otherwise the running statistics are used.
    """
    if clip.value.ndim != 5 or clip.shape[1:] != (cfg.frames, cfg.size, cfg.size, cfg.in_channels):
        raise ShapeError(
            f"clip batch {clip.shape} does not match (N, {cfg.frames}, {cfg.size}, {cfg.size}, {cfg.in_channels})"
        )
    x = standardize_input(cfg, clip)
    for i, (_, stride) in enumerate(cfg.stages):
        if cfg.use_tsm:
            x = fn.temporal_shift(x, cfg.tsm_fraction)
        x = fn.conv3d(x, params[f"stage{i}.k"], (1, stride, stride), (0, 1, 1))
        x = fn.relu(fn.bias_add(x, params[f"stage{i}.b"]))
        if i == 2:
            if cfg.block == "selfy" and cfg.selfy.enabled:
                x = selfy_block(x, params, cfg.selfy)
            elif cfg.block == "stcb":
                x = stcb_block(x, params, cfg.selfy)
    pooled = fn.mean(x, axes=(1, 2, 3))
    if cfg.pool_norm == "batch":
        gamma, beta = params["pool_bn.gamma"], params["pool_bn.beta"]
        if batch_stats is None:
            pooled = fn.frozen_norm(pooled, params["pool_bn.mean"].value, params["pool_bn.var"].value, gamma, beta)
        else:
            pooled, mu, var = fn.batch_norm(pooled, gamma, beta)
            batch_stats["pool_bn.mean"] = mu
            batch_stats["pool_bn.var"] = var  # biased, as used to normalise this batch
    return fn.linear(pooled, params["fc.w"], params["fc.b"])


def merge_moments(acc: tuple | None, n: int, mean: np.ndarray, var: np.ndarray) -> tuple:
    """Fold a chunk's (n, mean, biased var) into ``acc = (n, mean, sum of squared deviations)``."""
    mean, m2 = mean.astype(np.float64), var.astype(np.float64) * n
    if acc is None:
        return n, mean, m2
    n_a, mean_a, m2_a = acc
    tot = n_a + n
    delta = mean - mean_a
    return tot, mean_a + delta * (n / tot), m2_a + m2 + delta**2 * (n_a * n / tot)


def calibrate_pool_norm(cfg: TinyNetConfig, params: dict[str, np.ndarray], clips: np.ndarray, batch: int = 64) -> None:
    """Set the pooled-feature statistics to their exact values over ``clips`` under the current weights.

    The pooled features have a large common mean and a small spread across
    clips, so statistics gathered while the weights move lag by many
    standard deviations; recomputing them after the epoch avoids that.
    """
    if cfg.pool_norm != "batch":
        return
    acc = None
    for i in range(0, len(clips), batch):
        tape = Tape()
        pv = {k: tape.leaf(v) for k, v in params.items()}
        stats: dict = {}
        net_forward(cfg, pv, tape.leaf(clips[i : i + batch]), stats)
        tape.release()
        acc = merge_moments(acc, len(clips[i : i + batch]), stats["pool_bn.mean"], stats["pool_bn.var"])
    n, mean, m2 = acc
    params["pool_bn.mean"] = mean.astype(params["pool_bn.mean"].dtype)
    params["pool_bn.var"] = (m2 / n).astype(params["pool_bn.var"].dtype)


def forward(cfg: TinyNetConfig, params: dict[str, np.ndarray], clip: np.ndarray) -> np.ndarray:
    """Logits for one clip (T, H, W, 3) or a batch (N, T, H, W, 3)."""
    single = clip.ndim == 4
    tape = Tape()
    pv = {k: tape.leaf(a) for k, a in params.items()}
    out = net_forward(cfg, pv, tape.leaf(clip[None] if single else clip))
    return out.value[0] if single else out.value


# ---------------------------------------------------------------------------
# checkpoints: concatenated .vten records plus a text manifest
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray]) -> Path:
    """Write ``path`` (tensors) and ``path.manifest`` (name, shape, byte offset)."""
    path = Path(path)
    lines = []
    with open(path, "wb") as fh:
        offset = 0
        for name in sorted(params):
            arr = params[name]
            lines.append(f"{name}\t{'x'.join(str(s) for s in arr.shape)}\t{offset}")
            offset += write_vten(fh, arr)
    manifest = path.with_name(path.name + ".manifest")
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = path.with_name(path.name + ".manifest")
    params = {}
    with open(path, "rb") as fh:
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            name, shape, offset = line.split("\t")
            fh.seek(int(offset))
            arr = read_vten(fh)
            if "x".join(str(s) for s in arr.shape) != shape:
                raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, manifest says {shape}")
            params[name] = arr
    return params
