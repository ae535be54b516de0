"""Volumes, displacement fields, and the grid math defined on them.

A :class:`Volume` is a scalar value per voxel of an ``(h, w, l)`` grid
with physical voxel spacing carried as metadata. A
:class:`DisplacementField` stores one 3-vector per voxel, in voxel units
of its own grid: applying a field means reading the source at
``x + field[x]``. Physical spacing never enters the warping math.

The heavy lifting happens in :mod:`lapreg.ops`; this module owns
validation, the numpy-facing API, and the Jacobian-determinant map used
for fold detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch

from . import ops
from .errors import ShapeMismatchError, ValidationError

__all__ = [
    "Volume",
    "DisplacementField",
    "trilinear_sample",
    "warp",
    "warp_labels",
    "upsample_field",
    "compose",
    "jacobian_det",
]


@dataclass
class Volume:
    """Scalar 3D grid. ``data`` has shape ``(h, w, l)``; ``spacing`` is mm per voxel."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValidationError(f"Volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValidationError(f"Volume dimensions must be >= 1, got {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        if not np.isfinite(self.data).all():
            raise ValidationError("Volume data contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class DisplacementField:
    """Per-voxel displacement vectors, shape ``(h, w, l, 3)``, in voxel units."""

    data: np.ndarray
    spacing: tuple[float, float, float] = dataclass_field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValidationError(
                f"DisplacementField data must have shape (h, w, l, 3), got {self.data.shape}"
            )
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        if not np.isfinite(self.data).all():
            raise ValidationError("DisplacementField contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "DisplacementField":
        return cls(np.zeros((*shape, 3), dtype=dtype))


def _flow_tensor(field: DisplacementField) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(field.data, -1, 0)))


def trilinear_sample(vol: Volume, coords) -> float | np.ndarray:
    """Interpolate ``vol`` at continuous voxel positions.

    ``coords`` is a single ``(3,)`` position or an ``(..., 3)`` array.
    Positions outside the grid clamp to the border. Non-finite coordinates
    are rejected.
    """
    pts = np.asarray(coords, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValidationError(f"coords must have a trailing dimension of 3, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValidationError("coords contain non-finite values")
    data = torch.from_numpy(vol.data.astype(np.float64, copy=False))[None]
    out = ops.trilinear_sample(data, torch.from_numpy(pts))[0].numpy()
    return float(out) if pts.ndim == 1 else out


def warp(vol: Volume, field: DisplacementField, *, nearest: bool = False) -> Volume:
    """Deform ``vol`` by ``field``: ``out[x] = vol[x + field[x]]``.

    Set ``nearest=True`` for label-style data that must not be blended.
    """
    if vol.shape != field.shape:
        raise ShapeMismatchError("warp: volume vs field grid", vol.shape, field.shape)
    data = torch.from_numpy(vol.data)[None]
    flow = _flow_tensor(field).to(data.dtype)
    out = ops.warp(data, flow, nearest=nearest)[0].numpy()
    return Volume(out, vol.spacing)


def warp_labels(labels: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Nearest-neighbor warp of an integer label map."""
    labels = np.asarray(labels)
    if labels.shape != field.shape:
        raise ShapeMismatchError("warp_labels: labels vs field grid", labels.shape, field.shape)
    data = torch.from_numpy(labels.astype(np.int64, copy=False))[None]
    out = ops.warp(data, _flow_tensor(field).double(), nearest=True)[0].numpy()
    return out.astype(labels.dtype, copy=False)


def upsample_field(field: DisplacementField, factor: int = 2) -> DisplacementField:
    """Double a field's resolution; displacement values double with it."""
    if factor != 2:
        raise ValidationError(f"only factor=2 upsampling is supported, got {factor}")
    out = ops.upsample_flow(_flow_tensor(field)).numpy()
    return DisplacementField(np.moveaxis(out, 0, -1), field.spacing)


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field whose lookup map chains the two fields' lookups.

    ``result[x] = inner[x] + outer[x + inner[x]]``: a lookup first hops by
    ``inner``, then by ``outer`` evaluated at the hopped position. At the
    image level that makes ``warp(warp(v, outer), inner)`` agree with
    ``warp(v, compose(outer, inner))`` up to interpolation error - i.e.
    ``outer`` is the field that was applied to the volume first.
    """
    if outer.shape != inner.shape:
        raise ShapeMismatchError("compose: outer vs inner grid", outer.shape, inner.shape)
    out = ops.compose_flows(_flow_tensor(outer), _flow_tensor(inner)).numpy()
    return DisplacementField(np.moveaxis(out, 0, -1), inner.spacing)


def jacobian_det(field: DisplacementField) -> np.ndarray:
    """Determinant of the local deformation Jacobian, one value per voxel.

    Computes ``det(I + du/dx)`` with central differences in the interior
    and one-sided differences at the faces. Values <= 0 mark folding.
    """
    if min(field.shape) < 2:
        raise ValidationError(f"jacobian_det needs dims >= 2 per axis, got {field.shape}")
    u = field.data.astype(np.float64, copy=False)
    # g[c][a] = d u_c / d x_a
    g = [np.gradient(u[..., c], axis=(0, 1, 2), edge_order=1) for c in range(3)]
    m = [[g[c][a] + (1.0 if a == c else 0.0) for a in range(3)] for c in range(3)]
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )
