"""Synthetic outliers: Gaussian-noise training outliers and challenge-condition
test outliers (blur, dirty lens, rain, haze) at severity levels 0-5.

Level 0 is the identity for every kind; outputs are always clamped to [0, 1].
All transforms are pure functions of (image, spec, rng state).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import InputError


class ChallengeKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    LENS_BLUR = "lens_blur"
    DIRTY_LENS = "dirty_lens"
    RAIN = "rain"
    HAZE = "haze"


@dataclass(frozen=True)
class ChallengeSpec:
    kind: ChallengeKind
    level: int

    def __post_init__(self):
        if not 0 <= self.level <= 5:
            raise InputError(f"challenge level {self.level} outside 0-5")


def _check_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.min() < 0.0 or x.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return x


def gaussian_noise(x, sigma: float, rng) -> np.ndarray:
    """Additive per-pixel Gaussian noise, clamped back into [0, 1]."""
    x = _check_image(x)
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    if sigma == 0:
        return x.copy()
    return np.clip(x + sigma * rng.standard_normal(x.shape), 0.0, 1.0)


def _disk_kernel(radius: int) -> np.ndarray:
    size = 2 * radius + 1
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    mask = (xx * xx + yy * yy <= radius * radius).astype(np.float64)
    return mask / mask.sum()


def _dirty_lens(x: np.ndarray, level: int, rng) -> np.ndarray:
    h, w = x.shape
    out = x.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(2 * level):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        r = rng.uniform(0.08, 0.22) * min(h, w)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = np.exp(-d2 / (2.0 * r * r))
        alpha = 0.7 * mask
        out = (1.0 - alpha) * out  # blend toward dark smudge (value 0)
    return out


def _rain(x: np.ndarray, level: int, rng) -> np.ndarray:
    h, w = x.shape
    streaks = np.zeros_like(x)
    for _ in range(3 * level):
        length = max(3, int(0.5 * h))
        y0 = rng.uniform(-0.2 * h, h)
        x0 = rng.uniform(-0.2 * w, w)
        angle = np.deg2rad(rng.uniform(55.0, 75.0))  # steep diagonal fall
        dy, dx = np.sin(angle), np.cos(angle)
        for t in range(length):
            yi = int(round(y0 + t * dy))
            xi = int(round(x0 + t * dx))
            if 0 <= yi < h and 0 <= xi < w:
                streaks[yi, xi] = 1.0
    streaks = ndimage.gaussian_filter(streaks, 0.5, mode="reflect")
    return np.clip(x + 0.7 * streaks, 0.0, 1.0)


def _haze(x: np.ndarray, level: int) -> np.ndarray:
    t = 0.15 * level
    blended = x * (1.0 - t) + t
    return ndimage.gaussian_filter(blended, 0.5, mode="reflect")


def apply_challenge(x, spec: ChallengeSpec, rng) -> np.ndarray:
    """Apply one challenge condition at its level to a 2-D image."""
    x = _check_image(x)
    if x.ndim != 2:
        raise InputError("apply_challenge expects a 2-D image")
    if spec.level == 0:
        return x.copy()

    if spec.kind is ChallengeKind.GAUSSIAN_NOISE:
        out = gaussian_noise(x, 0.1 * spec.level, rng)
    elif spec.kind is ChallengeKind.GAUSSIAN_BLUR:
        out = ndimage.gaussian_filter(x, 0.5 * spec.level, mode="reflect")
    elif spec.kind is ChallengeKind.LENS_BLUR:
        out = ndimage.convolve(x, _disk_kernel(spec.level), mode="reflect")
    elif spec.kind is ChallengeKind.DIRTY_LENS:
        out = _dirty_lens(x, spec.level, rng)
    elif spec.kind is ChallengeKind.RAIN:
        out = _rain(x, spec.level, rng)
    elif spec.kind is ChallengeKind.HAZE:
        out = _haze(x, spec.level)
    else:  # pragma: no cover
        raise InputError(f"unknown challenge kind {spec.kind}")
    return np.clip(out, 0.0, 1.0)
