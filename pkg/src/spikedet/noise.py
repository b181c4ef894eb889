"""Evaluation-time image corruption: Gaussian pixel noise and simulated rain."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .errors import ConfigurationError, NumericInputError

STREAK_GAIN = 0.4 * 255.0  # additive brightness of a fully covered streak pixel
STREAK_ANGLES = (70.0, 110.0)  # degrees from horizontal
_SUPERSAMPLE = 4

RAIN_PRESETS = {
    "light": {"streaks": 20, "streak_length": 8, "blur_radius": 1, "brightness": 0.85},
    "heavy": {"streaks": 60, "streak_length": 14, "blur_radius": 2, "brightness": 0.6},
}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 0.0
    intensity: str | None = None
    streaks: int = 0
    streak_length: int = 0
    blur_radius: int = 0
    brightness: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "rain"):
            raise ConfigurationError("noise kind must be 'gaussian' or 'rain'")
        if not self.sigma >= 0:
            raise ConfigurationError("sigma must be >= 0")
        if not 0 < self.brightness <= 1:
            raise ConfigurationError("brightness factor must lie in (0, 1]")
        if self.streaks < 0 or self.streak_length < 0 or self.blur_radius < 0:
            raise ConfigurationError("rain parameters must be non-negative")
        if self.intensity is not None and self.intensity not in RAIN_PRESETS:
            raise ConfigurationError(f"intensity must be one of {sorted(RAIN_PRESETS)}")

    @classmethod
    def gaussian(cls, sigma: float, seed: int = 0) -> "NoiseSpec":
        return cls("gaussian", sigma=sigma, seed=seed)

    @classmethod
    def rain(cls, intensity: str, seed: int = 0) -> "NoiseSpec":
        if intensity not in RAIN_PRESETS:
            raise ConfigurationError(f"intensity must be one of {sorted(RAIN_PRESETS)}")
        return cls("rain", intensity=intensity, seed=seed, **RAIN_PRESETS[intensity])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


def image_seed(seed: int, image_index: int) -> int:
    """Independent per-image seed derived from (global seed, image index)."""
    return int(np.random.SeedSequence([seed, image_index]).generate_state(1)[0])


def _check(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise NumericInputError("expected an HxWx3 uint8 image")
    return image


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 255.0)).astype(np.uint8)


def gaussian_noise(image: np.ndarray, spec: NoiseSpec, seed: int | None = None) -> np.ndarray:
    image = _check(image)
    if spec.sigma == 0:
        return image.copy()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    return _to_uint8(image.astype(np.float64) + rng.normal(0.0, spec.sigma, image.shape))


def streak_mask(height: int, width: int, count: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of ``count`` straight streaks."""
    s = _SUPERSAMPLE
    canvas = Image.new("L", (width * s, height * s), 0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(count):
        angle = math.radians(rng.uniform(*STREAK_ANGLES))
        x0, y0 = rng.uniform(0, width), rng.uniform(0, height)
        x1, y1 = x0 + length * math.cos(angle), y0 + length * math.sin(angle)
        draw.line([(x0 * s, y0 * s), (x1 * s, y1 * s)], fill=255, width=s)
    small = canvas.resize((width, height), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def rain_sim(image: np.ndarray, spec: NoiseSpec, seed: int | None = None) -> np.ndarray:
    """Blur, then add bright streaks, then darken."""
    image = _check(image)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    out = image
    if spec.blur_radius > 0:
        out = np.asarray(Image.fromarray(image).filter(ImageFilter.BoxBlur(spec.blur_radius)))
    x = out.astype(np.float64)
    if spec.streaks > 0 and spec.streak_length > 0:
        h, w = image.shape[:2]
        x = x + STREAK_GAIN * streak_mask(h, w, spec.streaks, spec.streak_length, rng)[..., None]
    return _to_uint8(np.clip(x, 0.0, 255.0) * spec.brightness)


def apply_noise(image: np.ndarray, spec: NoiseSpec | None, seed: int | None = None) -> np.ndarray:
    if spec is None:
        return _check(image).copy()
    if spec.kind == "gaussian":
        return gaussian_noise(image, spec, seed)
    return rain_sim(image, spec, seed)


def corrupt_images(images, spec: NoiseSpec | None) -> list[np.ndarray]:
    """Corrupt a list of images with per-image seeds derived from ``spec.seed``."""
    if spec is None:
        return [_check(im).copy() for im in images]
    return [apply_noise(im, spec, image_seed(spec.seed, n)) for n, im in enumerate(images)]


def with_sigma(spec: NoiseSpec, sigma: float) -> NoiseSpec:
    return replace(spec, sigma=sigma)
