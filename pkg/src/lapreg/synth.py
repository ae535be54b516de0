"""Deterministic synthetic registration problems with known deformations.

Each pair is built by drawing a textured blob phantom (the moving image),
drawing a smooth fold-free displacement field, and *defining* the fixed
image as the warp of the moving image through that field. Ground truth is
therefore exact by construction: warping the moving image (or labels)
with ``gt_field`` reproduces the fixed image (or labels) bitwise, and a
perfect registration recovers the generator's field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FieldGenerationError, ValidationError
from .grid import DisplacementField, Volume, warp, warp_labels
from .metrics import LabelMap, neg_jacobian_fraction

__all__ = [
    "SynthPair",
    "generate_pair",
    "generate_translation_pair",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

GENERATOR_VERSION = 1


@dataclass
class SynthPair:
    """A moving/fixed pair with ground-truth field and label maps."""

    moving: Volume
    fixed: Volume
    gt_field: DisplacementField
    moving_labels: LabelMap
    fixed_labels: LabelMap
    seed: int


def _normalize01(data: np.ndarray) -> np.ndarray:
    lo, hi = float(data.min()), float(data.max())
    if hi - lo < 1e-12:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def _blob_phantom(rng: np.random.Generator, size, n_labels: int):
    """Textured intensity volume plus ellipsoidal blob labels."""
    shape = np.asarray(size)
    base = gaussian_filter(rng.standard_normal(size), sigma=2.0)
    image = 0.3 * _normalize01(base)

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    coords = np.stack(np.meshgrid(*[np.arange(s) for s in size], indexing="ij"), axis=-1)
    ramp = (coords @ direction) / np.linalg.norm(shape)
    image = image + 0.15 * _normalize01(ramp)

    r_lo, r_hi = 0.11 * shape.min(), 0.19 * shape.min()
    margin = r_hi + 2.0
    centers, radii = [], []
    for _ in range(n_labels):
        for _attempt in range(200):
            center = rng.uniform(margin, shape - margin)
            radius = rng.uniform(r_lo, r_hi, size=3)
            if all(
                np.linalg.norm(center - c) >= 0.8 * (radius.max() + r.max())
                for c, r in zip(centers, radii)
            ):
                break
        centers.append(center)
        radii.append(radius)

    labels = np.zeros(size, dtype=np.int32)
    best = np.full(size, np.inf)
    for i, (center, radius) in enumerate(zip(centers, radii)):
        rho = np.sqrt((((coords - center) / radius) ** 2).sum(axis=-1))
        inside = (rho <= 1.0) & (rho < best)
        labels[inside] = i + 1
        best = np.where(inside, rho, best)
        amplitude = rng.uniform(0.35, 0.7) * rng.choice([-1.0, 1.0])
        image = image + amplitude * np.clip(3.0 * (1.0 - rho), 0.0, 1.0)

    return _normalize01(image).astype(np.float32), labels


def _smooth_field(rng: np.random.Generator, size, max_disp: float) -> DisplacementField:
    """Random smooth displacement, rescaled until fold-free at <= max_disp.

    The field mixes a global translation (which moves structures without
    folding) with Gaussian-smoothed local noise, so typical displacements
    sit near the cap rather than far below it.
    """
    if max_disp == 0.0:
        return DisplacementField.zeros(size)
    sigma = max(min(size) / 8.0, 2.0)
    raw = np.stack(
        [gaussian_filter(rng.standard_normal(size), sigma=sigma) for _ in range(3)], axis=-1
    )
    raw_max = np.sqrt((raw**2).sum(axis=-1)).max()
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    dc_share = rng.uniform(0.5, 0.8)
    target = max_disp
    for _ in range(10):
        local = raw * ((1.0 - dc_share) * target / raw_max)
        field = DisplacementField(
            (local + direction * (dc_share * target)).astype(np.float32)
        )
        if neg_jacobian_fraction(field) == 0.0:
            return field
        target /= 2.0
    raise FieldGenerationError(
        f"could not build a fold-free field at max_disp={max_disp}; try a smaller value"
    )


def _check_size(size) -> tuple[int, ...]:
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s < 16 for s in size):
        raise ValidationError(f"size must be three dims >= 16, got {size}")
    if any(s % 16 != 0 for s in size):
        raise ValidationError(f"size must be divisible by 16 per axis, got {size}")
    return size


def generate_pair(seed: int, size=(32, 32, 32), n_labels: int = 4, max_disp: float = 3.0,
                  intensity_bias: float = 0.0) -> SynthPair:
    """Build one registration problem from a seed.

    ``max_disp`` caps the ground-truth displacement magnitude (voxels) and
    must stay below size/8. A nonzero ``intensity_bias`` multiplies the
    fixed image by a smooth (1 +/- bias) pattern and renormalizes, which
    exercises intensity-affine robustness but gives up the exact
    fixed == warp(moving) identity.
    """
    size = _check_size(size)
    if n_labels < 1:
        raise ValidationError(f"n_labels must be >= 1, got {n_labels}")
    if max_disp < 0 or max_disp >= min(size) / 8:
        raise ValidationError(f"max_disp must lie in [0, {min(size) / 8}), got {max_disp}")

    rng = np.random.default_rng(seed)
    image, labels = _blob_phantom(rng, size, n_labels)
    gt_field = _smooth_field(rng, size, float(max_disp))
    moving = Volume(image)
    fixed = warp(moving, gt_field)
    fixed_labels = warp_labels(labels, gt_field)
    if intensity_bias != 0.0:
        pattern = gaussian_filter(rng.standard_normal(size), sigma=4.0)
        pattern = intensity_bias * (2.0 * _normalize01(pattern) - 1.0)
        fixed = Volume(_normalize01(fixed.data * (1.0 + pattern)).astype(np.float32))
    return SynthPair(
        moving=moving,
        fixed=fixed,
        gt_field=gt_field,
        moving_labels=LabelMap(labels),
        fixed_labels=LabelMap(fixed_labels),
        seed=int(seed),
    )


def generate_translation_pair(seed: int, size=(32, 32, 32), shift=(2.0, 0.0, 0.0),
                              n_labels: int = 4) -> SynthPair:
    """Probe pair whose ground truth is a constant translation."""
    size = _check_size(size)
    rng = np.random.default_rng(seed)
    image, labels = _blob_phantom(rng, size, n_labels)
    data = np.broadcast_to(np.asarray(shift, dtype=np.float32), (*size, 3)).copy()
    gt_field = DisplacementField(data)
    moving = Volume(image)
    return SynthPair(
        moving=moving,
        fixed=warp(moving, gt_field),
        gt_field=gt_field,
        moving_labels=LabelMap(labels),
        fixed_labels=LabelMap(warp_labels(labels, gt_field)),
        seed=int(seed),
    )


def generate_dataset(seed: int, count: int, size=(32, 32, 32), n_labels: int = 4,
                     max_disp: float = 3.0, intensity_bias: float = 0.0):
    """Generate ``count`` pairs with per-pair seeds ``seed + index``.

    Returns ``(pairs, manifest)``; the manifest records every generation
    parameter and is identical across runs with equal arguments.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    size = _check_size(size)
    pair_seeds = [int(seed) + i for i in range(count)]
    pairs = [
        generate_pair(s, size=size, n_labels=n_labels, max_disp=max_disp,
                      intensity_bias=intensity_bias)
        for s in pair_seeds
    ]
    manifest = {
        "generator": "lapreg.synth",
        "generator_version": GENERATOR_VERSION,
        "seed": int(seed),
        "count": int(count),
        "size": list(size),
        "n_labels": int(n_labels),
        "max_disp": float(max_disp),
        "intensity_bias": float(intensity_bias),
        "pair_seeds": pair_seeds,
    }
    return pairs, manifest


_PAIR_FILES = ("moving", "fixed", "moving_labels", "fixed_labels", "gt_field")


def save_dataset(pairs, manifest: dict, out_dir) -> Path:
    """Write pairs as NIfTI files plus a JSON manifest; returns the manifest path."""
    from .io import save_field, save_labels, save_volume

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, pair in enumerate(pairs):
        names = {kind: f"pair_{index:03d}_{kind}.nii.gz" for kind in _PAIR_FILES}
        save_volume(pair.moving, out_dir / names["moving"])
        save_volume(pair.fixed, out_dir / names["fixed"])
        save_labels(pair.moving_labels, out_dir / names["moving_labels"])
        save_labels(pair.fixed_labels, out_dir / names["fixed_labels"])
        save_field(pair.gt_field, out_dir / names["gt_field"])
        entries.append({"seed": pair.seed, **names})
    manifest = dict(manifest, pairs=entries)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(manifest_path):
    """Read back a dataset written by :func:`save_dataset`."""
    from .io import load_field, load_labels, load_volume

    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    pairs = []
    for entry in manifest["pairs"]:
        pairs.append(
            SynthPair(
                moving=load_volume(base / entry["moving"]),
                fixed=load_volume(base / entry["fixed"]),
                gt_field=load_field(base / entry["gt_field"]),
                moving_labels=load_labels(base / entry["moving_labels"]),
                fixed_labels=load_labels(base / entry["fixed_labels"]),
                seed=int(entry["seed"]),
            )
        )
    return pairs, manifest
