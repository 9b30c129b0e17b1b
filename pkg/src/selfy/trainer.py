"""SGD training loop, metrics and the robustness sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as fn
from .autodiff import Tape, backward
from .backbone import BUFFERS, TinyNetConfig, calibrate_pool_norm, init_net, net_forward
from .data import KINDS, CorruptionSpec, corrupt_batch
from .tensor import ConfigError

METRIC_FIELDS = ("epoch", "train_loss", "train_acc", "test_acc")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch: int = 16
    seed: int = 0
    decay_at: tuple[float, ...] = (0.6, 0.8)
    decay_factor: float = 0.1
    eval_batch: int = 64
    calibration_clips: int = 512  # training clips used to recompute pooled-norm statistics each epoch

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch < 1 or self.eval_batch < 1 or self.calibration_clips < 1:
            raise ConfigError("batch sizes and calibration_clips must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    def milestones(self) -> tuple[int, ...]:
        """Epochs at whose start the rate is decayed (30 and 40 of 50 for the defaults)."""
        return tuple(int(round(f * self.epochs)) for f in self.decay_at)

    def lr_at(self, epoch: int) -> float:
        n = sum(epoch >= m for m in self.milestones())
        return self.lr * self.decay_factor**n


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean cross-entropy of (N, K) logits, or a single (K,) row with a scalar label."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    tape = Tape()
    return float(fn.cross_entropy(tape.leaf(z), np.atleast_1d(labels)).value)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


class Sgd:
    """Heavy-ball momentum: ``buf = m * buf + g; p -= lr * buf``."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float):
        self.params = params
        self.momentum = momentum
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            if g is None:
                continue
            b = self.buf[k]
            b *= self.momentum
            b += g
            self.params[k] -= (lr * b).astype(self.params[k].dtype)


def loss_and_grads(cfg: TinyNetConfig, params, clips, labels, batch_stats: dict | None = None):
    """Training-mode loss, logits and gradients; buffers get no gradient."""
    tape = Tape()
    pv = {k: (tape.leaf(v) if k in BUFFERS else tape.param(k, v)) for k, v in params.items()}
    logits = net_forward(cfg, pv, tape.leaf(clips), {} if batch_stats is None else batch_stats)
    loss = fn.cross_entropy(logits, labels)
    backward(tape, loss)
    tape.release()
    return float(loss.value), logits.value, {k: v.grad for k, v in pv.items() if k not in BUFFERS}


def predict(cfg: TinyNetConfig, params, clips: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(clips), batch):
        tape = Tape()
        pv = {k: tape.leaf(v) for k, v in params.items()}
        out.append(net_forward(cfg, pv, tape.leaf(clips[i : i + batch])).value)
    return np.concatenate(out)


def evaluate(cfg: TinyNetConfig, params, clips, labels, batch: int = 64) -> float:
    return accuracy(predict(cfg, params, clips, batch), labels)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: list[dict]

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (repr(float(r[k])) if k != "epoch" else r[k]) for k in METRIC_FIELDS})
    return buf.getvalue()


def train(
    net: TinyNetConfig,
    train_data: tuple[np.ndarray, np.ndarray],
    test_data: tuple[np.ndarray, np.ndarray] | None,
    cfg: TrainConfig,
    params: dict[str, np.ndarray] | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train ``net`` from ``init_net(net, cfg.seed)`` (or ``params``); one metrics row per epoch."""
    clips, labels = train_data
    if params is None:
        params = init_net(net, cfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    opt = Sgd(params, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    metrics = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(clips))
        tot_loss, correct = 0.0, 0
        for i in range(0, len(order), cfg.batch):
            idx = order[i : i + cfg.batch]
            loss, logits, grads = loss_and_grads(net, params, clips[idx], labels[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch + 1}")
            opt.step(grads, lr)
            tot_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
        calibrate_pool_norm(net, params, clips[: cfg.calibration_clips], cfg.eval_batch)
        row = {
            "epoch": epoch + 1,
            "train_loss": tot_loss / len(order),
            "train_acc": correct / len(order),
            "test_acc": evaluate(net, params, *test_data, batch=cfg.eval_batch) if test_data else float("nan"),
        }
        metrics.append(row)
        if log:
            log(
                f"epoch {row['epoch']:3d} lr {lr:.4g} loss {row['train_loss']:.4f} "
                f"train {row['train_acc']:.3f} test {row['test_acc']:.3f}"
            )
    return TrainResult(params, metrics)


def robustness_sweep(
    net: TinyNetConfig,
    params,
    test_data: tuple[np.ndarray, np.ndarray],
    kinds=KINDS,
    severities=range(1, 7),
    batch: int = 64,
) -> list[tuple[str, int, float]]:
    """Rows ``(kind, severity, top1)``; severity 0 is the clean accuracy."""
    clips, labels = test_data
    clean = evaluate(net, params, clips, labels, batch)
    rows = []
    for kind in kinds:
        rows.append((kind, 0, clean))
        for s in severities:
            bad = corrupt_batch(clips, CorruptionSpec(kind, int(s)))
            rows.append((kind, int(s), evaluate(net, params, bad, labels, batch)))
    return rows


def robustness_csv(rows) -> str:
    lines = ["kind,severity,top1"] + [f"{k},{s},{a!r}" for k, s, a in rows]
    return "\n".join(lines) + "\n"
