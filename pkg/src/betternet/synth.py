"""Synthetic polyp-like images for desk-scale training and tests.

Each image is drawn from its own counter-based generator keyed by
``(seed, index)``, so any single image can be regenerated without the others.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .data import SamplePair
from .errors import ConfigError


@dataclass
class SynthParams:
    size: int = 96
    count: int = 10
    seed: int = 0
    polyps_min: int = 1
    polyps_max: int = 3
    axis_min: float = 0.05
    axis_max: float = 0.3
    bg_noise: float = 0.05
    fg_noise: float = 0.04
    blur: float = 1.0
    illumination: float = 0.3
    folds_max: int = 2

    def validate(self) -> "SynthParams":
        if self.size < 8 or self.count < 0 or self.seed < 0:
            raise ConfigError("synthetic size must be >= 8, count and seed non-negative")
        if not 0 <= self.polyps_min <= self.polyps_max:
            raise ConfigError("need 0 <= polyps_min <= polyps_max")
        if not 0 < self.axis_min <= self.axis_max <= 0.5:
            raise ConfigError("need 0 < axis_min <= axis_max <= 0.5")
        if self.axis_min * self.size < 1.0:
            raise ConfigError(f"degenerate axes: axis_min * size = {self.axis_min * self.size:.3f} px < 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def raster_ellipse(size: int, cy: float, cx: float, a: float, b: float, theta: float = 0.0) -> np.ndarray:
    """Boolean raster of a rotated filled ellipse; pixel centres sit at i + 0.5."""
    if a <= 0 or b <= 0:
        raise ConfigError(f"degenerate ellipse axes {a}, {b}")
    y, x = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = y - cy, x - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _smooth_noise(rng: np.random.Generator, shape: tuple, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def synth_one(p: SynthParams, index: int) -> SamplePair:
    rng = image_rng(p.seed, index)
    n = p.size
    y, x = np.mgrid[0:n, 0:n] + 0.5

    bg_color = rng.uniform([0.55, 0.22, 0.18], [0.75, 0.38, 0.30])
    img = bg_color[:, None, None] + p.bg_noise * _smooth_noise(rng, (n, n), n / 24)[None]

    # mucosal folds: darker curved bands in the background
    for _ in range(rng.integers(0, p.folds_max + 1)):
        cy, cx = rng.uniform(0, n, size=2)
        radius = rng.uniform(0.3, 0.8) * n
        width = rng.uniform(0.6, 1.5)
        ring = np.abs(np.hypot(y - cy, x - cx) - radius)
        img -= 0.12 * np.exp(-(ring / width) ** 2)[None]

    mask = np.zeros((n, n), dtype=bool)
    for _ in range(rng.integers(p.polyps_min, p.polyps_max + 1)):
        a, b = rng.uniform(p.axis_min, p.axis_max, size=2) * n
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        theta = rng.uniform(0, np.pi)
        inside = raster_ellipse(n, cy, cx, a, b, theta)
        mask |= inside
        tint = bg_color + rng.uniform([0.08, 0.10, 0.05], [0.22, 0.25, 0.15])
        c, s = np.cos(theta), np.sin(theta)
        q = ((c * (x - cx) + s * (y - cy)) / a) ** 2 + ((-s * (x - cx) + c * (y - cy)) / b) ** 2
        dome = 0.12 * np.clip(1.0 - q, 0.0, 1.0)
        texture = p.fg_noise * _smooth_noise(rng, (3, n, n), 1.0)
        polyp = tint[:, None, None] + dome[None] + texture
        img = np.where(inside[None], polyp, img)

    # specular highlights anywhere in the frame
    for _ in range(rng.integers(0, 3)):
        cy, cx = rng.uniform(0, n, size=2)
        img += 0.35 * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * rng.uniform(0.5, 1.5) ** 2))[None]

    phi = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(phi) * (x - n / 2) + np.sin(phi) * (y - n / 2)) / n
    img = img * (1.0 + p.illumination * ramp)[None]
    if p.blur > 0:
        img = ndimage.gaussian_filter(img, (0, p.blur, p.blur), mode="nearest")
    return SamplePair(np.clip(img, 0.0, 1.0), mask.astype(np.float64), f"synth_{p.seed}_{index:05d}")


def synth_generate(p: SynthParams) -> list[SamplePair]:
    p.validate()
    return [synth_one(p, i) for i in range(p.count)]
