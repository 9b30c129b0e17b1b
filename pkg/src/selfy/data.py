"""Synthetic motion clips whose label is the motion direction, plus test-time corruptions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ConfigError, load_vten, save_vten

STATIC = 8
# reference corruption schedules, in pixels of a 224 px frame
REFERENCE_SIDE = 224
OCCLUSION_SIDES = (40, 80, 120, 160, 200, 224)
BLUR_RADIUS_SIGMA = ((15, 5), (10, 8), (15, 12), (20, 15), (25, 20), (30, 25))
KINDS = ("occlusion", "motion_blur")


@dataclass(frozen=True)
class SyntheticSpec:
    frames: int = 8
    size: int = 32
    classes: int = 9
    speed_range: tuple[float, float] = (1.0, 3.0)
    noise_std: float = 0.05
    seed: int = 42
    side_range: tuple[int, int] = (6, 10)

    def __post_init__(self):
        if self.classes != 9:
            raise ConfigError("the generator has 8 compass directions plus a static class")
        if self.frames < 1 or self.size < 1:
            raise ConfigError("frames and size must be positive")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad speed range {self.speed_range}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 1 <= self.side_range[0] <= self.side_range[1] <= self.size:
            raise ConfigError(f"bad square side range {self.side_range}")


def direction(label: int) -> np.ndarray:
    """Unit motion vector along (x, y) = (axis 1, axis 2) of a clip; zero for the static class."""
    if label == STATIC:
        return np.zeros(2)
    a = label * math.pi / 4
    return np.array([math.cos(a), math.sin(a)])


def trajectory(label: int, start, speed: float, frames: int, size: int) -> np.ndarray:
    """Integer top-left corner per frame, wrapped onto the torus."""
    t = np.arange(frames)[:, None]
    pos = np.asarray(start, dtype=np.float64)[None, :] + t * speed * direction(label)[None, :]
    return np.mod(np.rint(pos).astype(np.int64), size)


def make_clip(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int]:
    """Clip ``index`` of the dataset: a pure function of ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    label = int(rng.integers(spec.classes))
    side = int(rng.integers(spec.side_range[0], spec.side_range[1] + 1))
    texture = rng.uniform(0.0, 1.0, size=(side, side, 3))
    start = rng.uniform(0, spec.size, size=2)
    speed = rng.uniform(*spec.speed_range)
    corners = trajectory(label, start, speed, spec.frames, spec.size)
    n = spec.size
    clip = np.zeros((spec.frames, n, n, 3))
    rows, cols = np.arange(side), np.arange(side)
    for f, (x0, y0) in enumerate(corners):
        xs, ys = (x0 + rows) % n, (y0 + cols) % n
        clip[f][np.ix_(xs, ys)] = texture
    if spec.noise_std > 0:
        clip += rng.normal(0.0, spec.noise_std, size=clip.shape)
    return clip.astype(np.float32), label


def generate(spec: SyntheticSpec, count: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``count`` clips (N, T, H, W, 3) and labels (N,), indices ``start..start+count-1``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    clips = np.empty((count, spec.frames, spec.size, spec.size, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        clips[i], labels[i] = make_clip(spec, start + i)
    return clips, labels


def train_test(spec: SyntheticSpec, n_train: int, n_test: int):
    """Disjoint index ranges: train is ``0..n_train-1``, test follows."""
    return generate(spec, n_train), generate(spec, n_test, start=n_train)


# ---------------------------------------------------------------------------
# corruptions (applied to one frame, centre by default)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    target_frame: int | None = None  # None: (T - 1) // 2
    angle: float = 0.0  # blur direction in degrees, 0 = along y

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"corruption kind must be one of {KINDS}, got {self.kind!r}")
        if not 1 <= self.severity <= 6:
            raise ConfigError(f"severity must be in 1..6, got {self.severity}")

    def frame(self, frames: int) -> int:
        t = (frames - 1) // 2 if self.target_frame is None else self.target_frame
        if not 0 <= t < frames:
            raise ConfigError(f"target frame {t} outside a {frames}-frame clip")
        return t


def occlusion_side(severity: int, size: int) -> int:
    return int(round(size * OCCLUSION_SIDES[severity - 1] / REFERENCE_SIDE))


def occlude(clip: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Zero a centred square on the target frame of a (T, H, W, C) clip."""
    out = clip.copy()
    t = spec.frame(clip.shape[0])
    h, w = clip.shape[1], clip.shape[2]
    sh, sw = occlusion_side(spec.severity, h), occlusion_side(spec.severity, w)
    x0, y0 = (h - sh) // 2, (w - sw) // 2
    out[t, x0 : x0 + sh, y0 : y0 + sw] = 0
    return out


def blur_kernel(severity: int, size: int) -> np.ndarray:
    """One-sided Gaussian line kernel; tap i weighs the pixel i steps along the blur direction.

    Radius and sigma come from the reference schedule scaled by ``size / 224``.
    A scaled radius below one pixel gives the identity kernel ``[1]``.
    """
    radius, sigma = (v * size / REFERENCE_SIDE for v in BLUR_RADIUS_SIGMA[severity - 1])
    if radius < 1:
        return np.ones(1)
    taps = 2 * math.ceil(radius) + 1
    i = np.arange(taps)
    k = np.exp(-(i**2) / (2 * sigma**2))
    return k / k.sum()


def blur_frame(frame: np.ndarray, kernel: np.ndarray, angle: float = 0.0) -> np.ndarray:
    """Line blur of an (H, W, C) frame with edge replication."""
    a = math.radians(angle)
    h, w = frame.shape[:2]
    xs, ys = np.arange(h)[:, None], np.arange(w)[None, :]
    out = np.zeros(frame.shape, dtype=np.float64)
    for i, k in enumerate(kernel):
        dx, dy = int(round(i * math.sin(a))), int(round(i * math.cos(a)))
        out += k * frame[np.clip(xs + dx, 0, h - 1), np.clip(ys + dy, 0, w - 1)]
    return out.astype(frame.dtype)


def motion_blur(clip: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    out = clip.copy()
    t = spec.frame(clip.shape[0])
    out[t] = blur_frame(clip[t], blur_kernel(spec.severity, clip.shape[1]), spec.angle)
    return out


def corrupt(clip: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    return occlude(clip, spec) if spec.kind == "occlusion" else motion_blur(clip, spec)


def corrupt_batch(clips: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    return np.stack([corrupt(c, spec) for c in clips])


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_dataset(directory, clips: np.ndarray, labels: np.ndarray) -> Path:
    """Write ``clip_00000.vten`` ... and ``labels.csv`` (index,label)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "label"])
        for i, (clip, lab) in enumerate(zip(clips, labels)):
            save_vten(d / f"clip_{i:05d}.vten", clip)
            wr.writerow([i, int(lab)])
    return d


def load_dataset(directory) -> tuple[np.ndarray, np.ndarray]:
    d = Path(directory)
    with open(d / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    clips = np.stack([load_vten(d / f"clip_{int(r['index']):05d}.vten") for r in rows])
    return clips, np.array([int(r["label"]) for r in rows], dtype=np.int64)
