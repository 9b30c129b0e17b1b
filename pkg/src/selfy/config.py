"""Plain-text experiment configuration.

One ``section.key = value`` per line; ``#`` starts a comment.  A ``[section]``
header lets following lines drop the prefix.  Lists are whitespace separated
and integer ranges may be written ``a..b`` (inclusive).  A comma separates
alternatives, which only the ``sweep`` command expands.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

from .backbone import TinyNetConfig
from .data import KINDS, SyntheticSpec
from .extraction import ConvHead, MlpHead, SoftArgmaxHead
from .integration import IntegrationConfig, SelfyConfig
from .stss import OffsetWindow
from .tensor import ConfigError
from .trainer import TrainConfig

# key -> (default, description)
FIELDS: dict[str, tuple[str, str]] = {
    "net.stages": ("16:1 32:2 64:2", "per-frame conv stages as channels:stride"),
    "net.use_tsm": ("false", "temporal shift before every stage conv"),
    "net.tsm_fraction": ("0.25", "fraction of channels shifted each way"),
    "net.block": ("selfy", "block after the third stage: selfy | stcb | none"),
    "net.pool_norm": ("none", "none | batch (batch-normalise pooled features before the classifier)"),
    "net.input_mean": ("0", "subtracted from every input pixel"),
    "net.input_std": ("1", "input pixels are divided by this after the shift"),
    "window.offsets": ("-2..2", "temporal offsets, in L-axis order"),
    "window.d_u": ("4", "spatial radius along x"),
    "window.d_v": ("4", "spatial radius along y"),
    "selfy.enabled": ("true", "false skips the block (stage output passes through)"),
    "selfy.similarity": ("cosine", "cosine | embedded_gaussian"),
    "selfy.embed_dim": ("32", "embedding width for embedded_gaussian"),
    "selfy.head": ("conv", "conv | mlp | soft_argmax"),
    "selfy.head_channels": ("16 32 64 64", "conv head widths (the last is C_F)"),
    "selfy.mlp_widths": ("64 64 64 64", "mlp head widths"),
    "selfy.tau": ("0.01", "soft-argmax temperature"),
    "selfy.integration_layers": ("4", "number of (t, x, y) convs"),
    "selfy.integration_kernel": ("1 3 3", "integration kernel extents (t, x, y)"),
    "selfy.stss_resolution": ("14", "maps larger than this are resized for the block"),
    "data.frames": ("8", "frames per clip"),
    "data.size": ("32", "frame side in pixels"),
    "data.speed_min": ("1", "pixels per frame"),
    "data.speed_max": ("3", "pixels per frame"),
    "data.noise_std": ("0.05", "background noise"),
    "data.seed": ("42", "dataset seed"),
    "data.train_count": ("2000", "training clips"),
    "data.test_count": ("500", "test clips"),
    "train.lr": ("0.01", "initial learning rate"),
    "train.momentum": ("0.9", "SGD momentum"),
    "train.epochs": ("30", "epochs"),
    "train.batch": ("16", "minibatch size"),
    "train.seed": ("42", "init and shuffling seed"),
    "train.decay_at": ("0.6 0.8", "fractions of the run at which lr is decayed"),
    "train.decay_factor": ("0.1", "lr multiplier per decay"),
    "train.eval_batch": ("64", "batch size for evaluation"),
    "train.calibration_clips": ("512", "training clips used to recompute pooled-norm statistics after each epoch"),
    "eval.kinds": ("occlusion motion_blur", "corruptions for the robustness sweep"),
    "eval.severities": ("1..6", "corruption severities"),
    "bench.shape": ("8 14 14 32", "T X Y C of the benchmark feature map"),
    "bench.offsets": ("-2..2", "benchmark temporal offsets"),
    "bench.d_u": ("4", "benchmark radius along x"),
    "bench.d_v": ("4", "benchmark radius along y"),
    "bench.tile": ("4 4", "tile extents (x, y)"),
    "bench.repeats": ("5", "timed runs per variant (median reported)"),
    "bench.threads": ("0", "worker threads for the parallel variant, 0 = all cores"),
    "bench.seed": ("0", "benchmark input seed"),
    "gradcheck.tol": ("1e-6", "max relative error"),
    "gradcheck.coords": ("64", "sampled coordinates per tensor"),
}


class UsageError(ConfigError):
    """Bad command-line or config input (exit code 2)."""


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    section = ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key and section:
            key = f"{section}.{key}"
        if key not in FIELDS:
            raise UsageError(f"{source}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def parse_file(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_text(fh.read(), str(path))
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None


def expand_sweep(values: dict[str, str]) -> list[dict[str, str]]:
    """Cartesian product over comma-separated alternatives, in key order."""
    keys = [k for k, v in values.items() if "," in v]
    choices = [[c.strip() for c in values[k].split(",")] for k in keys]
    runs = []
    for combo in itertools.product(*choices):
        run = dict(values)
        run.update(zip(keys, combo))
        runs.append(run)
    return runs


def sweep_label(run: dict[str, str], base: dict[str, str]) -> str:
    parts = [f"{k}={run[k]}" for k in base if "," in base[k]]
    return " ".join(parts) if parts else "base"


# ---------------------------------------------------------------------------
# value parsers
# ---------------------------------------------------------------------------


def _ints(s: str) -> tuple[int, ...]:
    out: list[int] = []
    for tok in s.split():
        if ".." in tok:
            a, b = tok.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError(f"empty range {tok}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(tok))
    return tuple(out)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.split())


def _bool(s: str) -> bool:
    t = s.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _stages(s: str) -> tuple[tuple[int, int], ...]:
    out = []
    for tok in s.split():
        c, _, st = tok.partition(":")
        out.append((int(c), int(st or 1)))
    return tuple(out)


@dataclass(frozen=True)
class BenchConfig:
    shape: tuple[int, int, int, int] = (8, 14, 14, 32)
    window: OffsetWindow = field(default_factory=lambda: OffsetWindow.symmetric(2, 4))
    tile: tuple[int, int] = (4, 4)
    repeats: int = 5
    threads: int = 0
    seed: int = 0

    def worker_threads(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class ExperimentConfig:
    net: TinyNetConfig
    data: SyntheticSpec
    train_count: int
    test_count: int
    train: TrainConfig
    kinds: tuple[str, ...]
    severities: tuple[int, ...]
    bench: BenchConfig
    grad_tol: float
    grad_coords: int
    values: dict = field(compare=False, repr=False)

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in FIELDS)


def resolve(overrides: dict[str, str] | None = None) -> dict[str, str]:
    values = {k: d for k, (d, _) in FIELDS.items()}
    for k, v in (overrides or {}).items():
        if k not in FIELDS:
            raise UsageError(f"unknown key {k!r}")
        values[k] = v
    return values


def build(overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Defaults updated with ``overrides`` -> typed config.  Raises UsageError."""
    v = resolve(overrides)
    for k, s in v.items():
        if "," in s:
            raise UsageError(f"{k} lists alternatives ({s!r}); only 'sweep' expands them")
    key = None
    try:
        key = "selfy.head"
        head_name = v[key]
        if head_name == "conv":
            head = ConvHead(channels=_ints(v["selfy.head_channels"]))
        elif head_name == "mlp":
            head = MlpHead(widths=_ints(v["selfy.mlp_widths"]))
        elif head_name == "soft_argmax":
            head = SoftArgmaxHead(tau=float(v["selfy.tau"]))
        else:
            raise ValueError(f"unknown head {head_name!r}")
        key = "window"
        window = OffsetWindow(_ints(v["window.offsets"]), int(v["window.d_u"]), int(v["window.d_v"]))
        key = "selfy"
        kern = _ints(v["selfy.integration_kernel"])
        if len(kern) != 3:
            raise ValueError("selfy.integration_kernel needs three extents")
        selfy = SelfyConfig(
            window=window,
            similarity=v["selfy.similarity"],
            embed_dim=int(v["selfy.embed_dim"]),
            head=head,
            integration=IntegrationConfig(layers=int(v["selfy.integration_layers"]), kernel=kern),
            stss_resolution=int(v["selfy.stss_resolution"]),
            enabled=_bool(v["selfy.enabled"]),
        )
        selfy.c_f()  # validates the head against the window
        key = "data"
        data = SyntheticSpec(
            frames=int(v["data.frames"]),
            size=int(v["data.size"]),
            speed_range=(float(v["data.speed_min"]), float(v["data.speed_max"])),
            noise_std=float(v["data.noise_std"]),
            seed=int(v["data.seed"]),
        )
        key = "net"
        net = TinyNetConfig(
            stages=_stages(v["net.stages"]),
            use_tsm=_bool(v["net.use_tsm"]),
            tsm_fraction=float(v["net.tsm_fraction"]),
            block=v["net.block"],
            pool_norm=v["net.pool_norm"],
            input_mean=float(v["net.input_mean"]),
            input_std=float(v["net.input_std"]),
            classes=data.classes,
            frames=data.frames,
            size=data.size,
            selfy=selfy,
        )
        key = "train"
        train = TrainConfig(
            lr=float(v["train.lr"]),
            momentum=float(v["train.momentum"]),
            epochs=int(v["train.epochs"]),
            batch=int(v["train.batch"]),
            seed=int(v["train.seed"]),
            decay_at=_floats(v["train.decay_at"]),
            decay_factor=float(v["train.decay_factor"]),
            eval_batch=int(v["train.eval_batch"]),
            calibration_clips=int(v["train.calibration_clips"]),
        )
        key = "eval"
        kinds = tuple(v["eval.kinds"].split())
        for kind in kinds:
            if kind not in KINDS:
                raise ValueError(f"unknown corruption {kind!r}")
        severities = _ints(v["eval.severities"])
        if any(not 1 <= s <= 6 for s in severities):
            raise ValueError("severities must lie in 1..6")
        key = "bench"
        shape = _ints(v["bench.shape"])
        tile = _ints(v["bench.tile"])
        if len(shape) != 4 or len(tile) != 2:
            raise ValueError("bench.shape needs T X Y C and bench.tile needs two extents")
        bench = BenchConfig(
            shape=shape,
            window=OffsetWindow(_ints(v["bench.offsets"]), int(v["bench.d_u"]), int(v["bench.d_v"])),
            tile=tile,
            repeats=int(v["bench.repeats"]),
            threads=int(v["bench.threads"]),
            seed=int(v["bench.seed"]),
        )
        key = "counts"
        counts = int(v["data.train_count"]), int(v["data.test_count"])
        if min(counts) < 1 or int(v["bench.repeats"]) < 1:
            raise ValueError("counts and repeats must be >= 1")
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid {key} configuration: {e}") from None
    return ExperimentConfig(
        net=net,
        data=data,
        train_count=counts[0],
        test_count=counts[1],
        train=train,
        kinds=kinds,
        severities=severities,
        bench=bench,
        grad_tol=float(v["gradcheck.tol"]),
        grad_coords=int(v["gradcheck.coords"]),
        values=v,
    )


def describe_fields() -> str:
    return "".join(f"{k} = {d}    # {doc}\n" for k, (d, doc) in FIELDS.items())
