"""Image preprocessing and the stochastic diverse-input transform.

Images are ``(H, W, C)`` float arrays in [0, 1]. Every random step draws from
the generator it is handed, so a fixed seed reproduces the output exactly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent stream for a tuple of non-negative integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {x.shape}")
    return x


# ---------------------------------------------------------------- deterministic ops


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(x, sigma: float) -> np.ndarray:
    """Separable blur, kernel radius ceil(3 sigma), edges clamped."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = _image(x)
    if sigma == 0:
        return x.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(x, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def _sample(x, rows, cols) -> np.ndarray:
    # bilinear; coordinates past the border read the nearest edge pixel
    return np.stack(
        [ndimage.map_coordinates(x[..., c], [rows, cols], order=1, mode="nearest")
         for c in range(x.shape[2])], axis=-1)


def affine(x, scale: float = 1.0, translate=(0.0, 0.0), rotate_deg: float = 0.0,
           shear_deg: float = 0.0) -> np.ndarray:
    """Scale, shear and rotate about the image center, then shift.

    ``translate`` is ``(dx, dy)`` in pixels (positive dx moves content right).
    Output pixels are inverse-mapped and bilinearly resampled.
    """
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    x = _image(x)
    dx, dy = translate
    if scale == 1 and dx == 0 and dy == 0 and rotate_deg == 0 and shear_deg == 0:
        return x.copy()
    h, w, _ = x.shape
    th, sh = np.deg2rad(rotate_deg), np.deg2rad(shear_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
    inv = np.linalg.inv(rot @ shear * scale)  # acts on (col, row) vectors
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    u = cols - cx - dx
    v = rows - cy - dy
    src_c = inv[0, 0] * u + inv[0, 1] * v + cx
    src_r = inv[1, 0] * u + inv[1, 1] * v + cy
    return _sample(x, src_r, src_c)


def resize(x, out_h: int, out_w: int) -> np.ndarray:
    x = _image(x)
    h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    r = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    c = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    rows, cols = np.meshgrid(r, c, indexing="ij")
    return _sample(x, rows, cols)


def center_crop(x, out_h: int, out_w: int) -> np.ndarray:
    """Centered window; an odd margin puts the extra pixel on the top/left."""
    x = _image(x)
    h, w, _ = x.shape
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot crop {h}x{w} to {out_h}x{out_w}")
    top = (h - out_h + 1) // 2
    left = (w - out_w + 1) // 2
    return x[top:top + out_h, left:left + out_w].copy()


def normalize(x, mean, std) -> np.ndarray:
    x = _image(x)
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    if mean.shape != (x.shape[2],) or std.shape != (x.shape[2],):
        raise ValueError(f"need {x.shape[2]} per-channel mean/std values")
    if np.any(std == 0):
        raise ValueError("std must be non-zero")
    return (x - mean) / std


def denormalize(z, mean, std) -> np.ndarray:
    return np.asarray(z) * np.asarray(std, dtype=np.float64) + np.asarray(mean, dtype=np.float64)


def to_grayscale(x) -> np.ndarray:
    x = _image(x)
    if x.shape[2] == 1 or (np.array_equal(x[..., 0], x[..., 1]) and np.array_equal(x[..., 1], x[..., 2])):
        return x.copy()
    gray = x @ LUMA
    return np.repeat(gray[..., None], 3, axis=2)


# ---------------------------------------------------------------- pipeline steps


@dataclass(frozen=True)
class RandomCrop:
    fraction: float = 0.875

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("crop fraction must be in (0, 1]")

    def __call__(self, x, rng):
        h, w, _ = x.shape
        ch, cw = max(1, round(h * self.fraction)), max(1, round(w * self.fraction))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        return resize(x[top:top + ch, left:left + cw], h, w)

    def text(self):
        return f"random_crop({self.fraction:g})"


@dataclass(frozen=True)
class CenterCrop:
    fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("crop fraction must be in (0, 1]")

    def __call__(self, x, rng):
        h, w, _ = x.shape
        out = center_crop(x, max(1, round(h * self.fraction)), max(1, round(w * self.fraction)))
        return resize(out, h, w)

    def text(self):
        return f"center_crop({self.fraction:g})"


@dataclass(frozen=True)
class GaussianBlur:
    sigma: float = 0.5

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def __call__(self, x, rng):
        return gaussian_blur(x, self.sigma)

    def text(self):
        return f"gaussian_blur({self.sigma:g})"


@dataclass(frozen=True)
class ContrastNormalize:
    """Stretch each channel about its mean by a strength drawn from [low, high]."""

    low: float = 0.75
    high: float = 1.25

    def __post_init__(self):
        if not 0 <= self.low <= self.high:
            raise ValueError("contrast range must satisfy 0 <= low <= high")

    def __call__(self, x, rng):
        s = rng.uniform(self.low, self.high)
        mean = x.mean(axis=(0, 1), keepdims=True)
        return mean + s * (x - mean)

    def text(self):
        return f"contrast({self.low:g}, {self.high:g})"


@dataclass(frozen=True)
class RandomAffine:
    scale_low: float = 0.9
    scale_high: float = 1.1
    translate: float = 0.05  # fraction of the side
    rotate: float = 10.0
    shear: float = 8.0

    def __post_init__(self):
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("scale range must be positive and ordered")
        if self.translate < 0 or self.rotate < 0 or self.shear < 0:
            raise ValueError("affine ranges must be non-negative")

    def __call__(self, x, rng):
        h, w, _ = x.shape
        s = rng.uniform(self.scale_low, self.scale_high)
        dx = rng.uniform(-self.translate, self.translate) * w
        dy = rng.uniform(-self.translate, self.translate) * h
        rot = rng.uniform(-self.rotate, self.rotate)
        sh = rng.uniform(-self.shear, self.shear)
        return affine(x, s, (dx, dy), rot, sh)

    def text(self):
        return (f"affine({self.scale_low:g}, {self.scale_high:g}, {self.translate:g}, "
                f"{self.rotate:g}, {self.shear:g})")


@dataclass(frozen=True)
class Grayscale:
    prob: float = 1.0

    def __post_init__(self):
        if not 0 <= self.prob <= 1:
            raise ValueError("grayscale probability must be in [0, 1]")

    def __call__(self, x, rng):
        if rng.random() < self.prob:
            return to_grayscale(x)
        return x

    def text(self):
        return f"grayscale({self.prob:g})"


STEP_TYPES = {
    "random_crop": RandomCrop,
    "center_crop": CenterCrop,
    "gaussian_blur": GaussianBlur,
    "contrast": ContrastNormalize,
    "affine": RandomAffine,
    "grayscale": Grayscale,
}


@dataclass(frozen=True)
class TransformPipeline:
    """Ordered steps applied together with probability ``p``."""

    steps: tuple = ()
    p: float = 0.5

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        object.__setattr__(self, "steps", tuple(self.steps))

    def with_p(self, p: float) -> "TransformPipeline":
        return TransformPipeline(self.steps, p)

    def transform(self, x, rng) -> np.ndarray:
        """Apply every step unconditionally, then clamp."""
        out = _image(x)
        for step in self.steps:
            out = step(out, rng)
        return np.clip(out, 0.0, 1.0)

    def text(self) -> str:
        return ", ".join(step.text() for step in self.steps)


def default_pipeline(p: float = 0.5) -> TransformPipeline:
    return TransformPipeline(
        (RandomCrop(0.875), GaussianBlur(0.5), ContrastNormalize(0.75, 1.25),
         RandomAffine(), Grayscale(0.25)), p)


_STEP_RE = re.compile(r"\s*([a-z_]+)\s*\(([^)]*)\)\s*,?")


def parse_steps(text: str) -> tuple:
    """Parse ``"random_crop(0.875), gaussian_blur(0.5), grayscale"``-style lists."""
    steps, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _STEP_RE.match(text, pos)
        if m is None:
            bare = re.match(r"\s*([a-z_]+)\s*,?", text[pos:])
            if bare is None or bare.group(1) not in STEP_TYPES:
                raise ValueError(f"cannot parse pipeline step at {text[pos:]!r}")
            steps.append(STEP_TYPES[bare.group(1)]())
            pos += bare.end()
            continue
        name, args = m.group(1), m.group(2).strip()
        if name not in STEP_TYPES:
            raise ValueError(f"unknown pipeline step {name!r}")
        values = [float(a) for a in args.split(",")] if args else []
        steps.append(STEP_TYPES[name](*values))
        pos = m.end()
    return tuple(steps)


# ---------------------------------------------------------------- stochastic application


def maybe_transform(pipeline: TransformPipeline, x, rng) -> tuple[np.ndarray, bool]:
    """One Bernoulli(p) draw, always consumed; transform on success."""
    if rng.random() < pipeline.p:
        return pipeline.transform(x, rng), True
    return x, False


def apply_stochastic(pipeline: TransformPipeline, x, rng) -> np.ndarray:
    """T(x; p): the transformed image with probability p, else ``x`` itself."""
    return maybe_transform(pipeline, x, rng)[0]


def expand_sources(sources, factor: int, pipeline: TransformPipeline, seed: int) -> list[np.ndarray]:
    """``factor`` images per source: the original followed by forced transforms."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if len(sources) == 0:
        raise ValueError("no source images")
    forced = pipeline.with_p(1.0)
    out = []
    for i, src in enumerate(sources):
        src = _image(src)
        out.append(src)
        for copy in range(1, factor):
            out.append(apply_stochastic(forced, src, derive_rng(seed, i, copy)))
    return out
