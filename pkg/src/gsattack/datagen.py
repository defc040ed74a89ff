"""Procedural identity faces and the on-disk dataset layout.

Every identity is a parametric cartoon face (ellipse, hair band, two eyes,
curved mouth, per-channel colors) drawn from ``hash(seed, identity)``; every
image adds a small random rotation and shift plus Gaussian intensity noise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats

NOISE_SIGMA = 0.03
MAX_ROTATION_DEG = 6.0
MAX_SHIFT_PX = 1.0

SPLITS = ("train", "heldout", "attack-source", "attack-target")


@dataclass(frozen=True)
class IdentitySpec:
    identity: int
    center: tuple[float, float]
    axes: tuple[float, float]
    skin: tuple[float, float, float]
    background: tuple[float, float, float]
    hair: tuple[float, float, float]
    hairline: float
    eye_dx: float
    eye_dy: float
    eye_radius: float
    eye_color: tuple[float, float, float]
    mouth_dy: float
    mouth_half_width: float
    mouth_curvature: float
    mouth_color: tuple[float, float, float]


def identity_spec(seed: int, identity: int) -> IdentitySpec:
    rng = np.random.default_rng([seed, identity, 0x1D])
    u = rng.uniform

    def color(lo, hi):
        return tuple(float(v) for v in u(lo, hi, size=3))

    return IdentitySpec(
        identity=identity,
        center=(float(u(14.5, 17.5)), float(u(14.5, 17.5))),
        axes=(float(u(10.0, 13.0)), float(u(7.5, 10.5))),
        skin=color(0.55, 0.75),
        background=color(0.25, 0.45),
        hair=color(0.15, 0.35),
        hairline=float(u(-0.75, -0.35)),
        eye_dx=float(u(2.8, 5.0)),
        eye_dy=float(u(-4.0, -1.5)),
        eye_radius=float(u(1.0, 2.0)),
        eye_color=color(0.05, 0.25),
        mouth_dy=float(u(3.5, 6.5)),
        mouth_half_width=float(u(2.5, 5.0)),
        mouth_curvature=float(u(-0.35, 0.35)),
        mouth_color=color(0.3, 0.5),
    )


def _soft(d):
    # 1 inside (d < 0), 0 outside, ~1px anti-aliased edge
    return np.clip(0.5 - d, 0.0, 1.0)


def render(spec: IdentitySpec, size: int = 32, rng: np.random.Generator | None = None) -> np.ndarray:
    """Render one ``(size, size, 3)`` face; ``rng`` adds pose jitter and noise."""
    scale = size / 32.0
    cy, cx = (c * scale for c in spec.center)
    theta, sy, sx = 0.0, 0.0, 0.0
    if rng is not None:
        theta = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
        sy, sx = rng.uniform(-MAX_SHIFT_PX, MAX_SHIFT_PX, size=2) * scale
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # face-frame coordinates: undo shift, then rotation about the face center
    y0, x0 = rows - cy - sy, cols - cx - sx
    ct, st = np.cos(theta), np.sin(theta)
    y = ct * y0 - st * x0
    x = st * y0 + ct * x0

    ay, ax = (a * scale for a in spec.axes)
    rho = np.sqrt((y / ay) ** 2 + (x / ax) ** 2)
    face = _soft((rho - 1.0) * min(ay, ax))
    hair = face * _soft((y / ay - spec.hairline) * ay)

    img = np.empty((size, size, 3))
    img[:] = spec.background
    img = img * (1 - face[..., None]) + face[..., None] * np.asarray(spec.skin)
    img = img * (1 - hair[..., None]) + hair[..., None] * np.asarray(spec.hair)

    r = spec.eye_radius * scale
    for side in (-1.0, 1.0):
        d = np.hypot(y - spec.eye_dy * scale, x - side * spec.eye_dx * scale) - r
        eye = _soft(d)[..., None]
        img = img * (1 - eye) + eye * np.asarray(spec.eye_color)

    hw = spec.mouth_half_width * scale
    curve = spec.mouth_dy * scale + spec.mouth_curvature * (x ** 2) / max(hw, 1e-9)
    in_span = _soft(np.abs(x) - hw)
    mouth = (_soft(np.abs(y - curve) - 0.8 * scale) * in_span)[..., None]
    img = img * (1 - mouth) + mouth * np.asarray(spec.mouth_color)

    if rng is not None:
        img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_images(seed: int, identities, indices, size: int = 32):
    """Images for every (identity, index) pair, identity-major.

    Image ``index`` of ``identity`` depends only on ``(seed, identity, index)``,
    so disjoint index ranges give disjoint samples of the same identities.
    """
    identities = list(identities)
    indices = list(indices)
    out = np.empty((len(identities) * len(indices), size, size, 3))
    labels = np.empty(len(out), dtype=np.int64)
    k = 0
    for ident in identities:
        spec = identity_spec(seed, ident)
        for idx in indices:
            out[k] = render(spec, size, np.random.default_rng([seed, ident, idx]))
            labels[k] = ident
            k += 1
    return out, labels


def split_for(identity: int, index: int, identities: int, per_identity: int) -> str:
    """Per identity: 2/3 train, 1/4 heldout, the rest attack images.

    Attack images of the first half of the identities are attack sources, the
    second half attack targets, so the two roles never share an identity.
    """
    n_train = (2 * per_identity) // 3
    n_held = per_identity // 4
    if index < n_train:
        return "train"
    if index < n_train + n_held:
        return "heldout"
    return "attack-source" if identity < max(1, identities // 2) else "attack-target"


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    split: str


@dataclass
class Dataset:
    """An in-memory dataset: images in manifest order plus the manifest."""

    images: np.ndarray
    records: list[Record]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = np.array([r.split == name for r in self.records], dtype=bool)
        return self.images[mask], self.labels[mask]

    def indices(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]


def build_dataset(seed: int = 0, identities: int = 10, per_identity: int = 120, size: int = 32,
                  quantize: bool = True) -> Dataset:
    """Generate the dataset in memory, exactly as :func:`generate_dataset` writes it."""
    if identities < 1 or per_identity < 1:
        raise ValueError("identities and per_identity must be >= 1")
    images, labels = sample_images(seed, range(identities), range(per_identity), size)
    if quantize:
        images = formats.quantize(images)
    records = []
    for k, (ident, idx) in enumerate((i, j) for i in range(identities) for j in range(per_identity)):
        records.append(Record(f"images/id{ident:03d}_{idx:04d}.ppm", int(labels[k]),
                              split_for(ident, idx, identities, per_identity)))
    return Dataset(images, records)


def generate_dataset(out_dir, seed: int = 0, identities: int = 10, per_identity: int = 120,
                     size: int = 32) -> Dataset:
    """Write pixmaps plus ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    ds = build_dataset(seed, identities, per_identity, size)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    for img, rec in zip(ds.images, ds.records):
        formats.save_image(img, out_dir / rec.path)
    formats.write_manifest(ds.records, out_dir / "manifest.tsv")
    return ds


def load_dataset(root) -> Dataset:
    root = Path(root)
    records = formats.read_manifest(root / "manifest.tsv")
    images = np.stack([formats.load_image(root / r.path) for r in records]) if records else np.zeros((0,))
    return Dataset(images, records)


def source_target_sets(ds: Dataset, set_size: int = 5):
    """Pair attack-source sets with attack-target sets.

    Source images of each source identity are chunked into sets of
    ``set_size`` in manifest order. Source identity ``i`` (sorted) attacks
    target identity ``i mod n_targets``, using that identity's first
    ``set_size`` attack-target images.
    """
    src_ids = sorted({r.label for r in ds.records if r.split == "attack-source"})
    tgt_ids = sorted({r.label for r in ds.records if r.split == "attack-target"})
    if not src_ids or not tgt_ids:
        raise ValueError("dataset has no attack-source or attack-target split")
    sets = []
    for i, sid in enumerate(src_ids):
        tid = tgt_ids[i % len(tgt_ids)]
        src = [k for k, r in enumerate(ds.records) if r.split == "attack-source" and r.label == sid]
        tgt = [k for k, r in enumerate(ds.records) if r.split == "attack-target" and r.label == tid]
        tgt = tgt[:set_size]
        for start in range(0, len(src), set_size):
            sets.append({"source_label": sid, "target_label": tid,
                         "sources": src[start:start + set_size], "targets": tgt})
    return sets
