"""Differentiable grid kernels on torch tensors.

Conventions used throughout the package:

* scalar volumes are ``(C, D, H, W)`` tensors (C = channels),
* displacement fields are ``(3, D, H, W)`` tensors whose component ``c``
  is the offset along array axis ``c``, measured in voxels of the field's
  own grid,
* sampling positions outside the grid are clamped to the border
  (border replication), which also zeroes their positional gradient.

All kernels are pure functions and keep the autograd graph intact, so the
same code serves inference and training.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

__all__ = [
    "identity_grid",
    "trilinear_sample",
    "nearest_sample",
    "warp",
    "warp_fused",
    "upsample_flow",
    "compose_flows",
    "downsample_average",
]


def identity_grid(shape, *, dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel-index grid of a ``(D, H, W)`` shape as a ``(3, D, H, W)`` tensor."""
    axes = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def _corner_indices(coords: torch.Tensor, size) -> tuple[list, list, list]:
    """Clamped lower/upper corner indices and fractional offsets per axis.

    ``coords`` is ``(N, 3)``. Gradients flow through the fractional part
    only; integer corner indices are detached by construction.
    """
    lo, hi, frac = [], [], []
    for axis in range(3):
        c = coords[:, axis].clamp(0, size[axis] - 1)
        base = c.detach().floor()
        i0 = base.long()
        lo.append(i0)
        hi.append((i0 + 1).clamp(max=size[axis] - 1))
        frac.append(c - base)
    return lo, hi, frac


def trilinear_sample(data: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``data (C, D, H, W)`` at continuous voxel positions.

    ``coords`` is ``(..., 3)``; the result is ``(C, ...)``. Positions on
    integer grid points reproduce the stored values bitwise.
    """
    size = data.shape[1:]
    out_shape = coords.shape[:-1]
    flat = coords.reshape(-1, 3)
    (i0, i1, f) = _corner_indices(flat, size)
    w0 = [1.0 - fa for fa in f]
    w1 = f

    out = None
    for a, ia, wa in ((0, i0[0], w0[0]), (1, i1[0], w1[0])):
        for b, ib, wb in ((0, i0[1], w0[1]), (1, i1[1], w1[1])):
            for c, ic, wc in ((0, i0[2], w0[2]), (1, i1[2], w1[2])):
                term = data[:, ia, ib, ic] * (wa * wb * wc)
                out = term if out is None else out + term
    return out.reshape(data.shape[0], *out_shape)


def nearest_sample(data: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor variant of :func:`trilinear_sample`.

    Works for integer dtypes (label maps). Halfway positions round to the
    even neighbor, matching ``torch.round``/``numpy.round``.
    """
    size = data.shape[1:]
    out_shape = coords.shape[:-1]
    flat = coords.reshape(-1, 3)
    idx = [flat[:, a].clamp(0, size[a] - 1).round().long() for a in range(3)]
    return data[:, idx[0], idx[1], idx[2]].reshape(data.shape[0], *out_shape)


def warp(vol: torch.Tensor, flow: torch.Tensor, *, nearest: bool = False) -> torch.Tensor:
    """Resample ``vol (C, D, H, W)`` through a displacement field.

    ``out[x] = vol[x + flow[x]]`` with border-clamped trilinear (or
    nearest-neighbor) interpolation. ``flow`` is ``(3, D, H, W)`` on the
    same grid as ``vol``.
    """
    base = identity_grid(flow.shape[1:], dtype=flow.dtype, device=flow.device)
    coords = (base + flow).permute(1, 2, 3, 0)
    sampler = nearest_sample if nearest else trilinear_sample
    return sampler(vol, coords)


def _fused_sample(data: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Border-clamped trilinear sampling via the fused grid-sampler kernel.

    ``positions`` is ``(3, D, H, W)`` in voxel units. Numerically equal to
    :func:`trilinear_sample` up to coordinate-normalization rounding
    (~1e-6 relative), and much faster; integer positions are therefore
    *not* reproduced bitwise, so exact-identity paths must use the gather
    sampler instead.
    """
    size = data.shape[1:]
    norm = []
    for axis in (2, 1, 0):  # grid_sample wants (x, y, z) = (W, H, D) order
        s = size[axis]
        factor = 2.0 / (s - 1) if s > 1 else 0.0
        norm.append(positions[axis] * factor - 1.0)
    grid = torch.stack(norm, dim=-1)
    return F.grid_sample(
        data[None], grid[None], mode="bilinear", padding_mode="border", align_corners=True
    )[0]


def warp_fused(vol: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Fast trilinear :func:`warp` for training-time code paths."""
    base = identity_grid(flow.shape[1:], dtype=flow.dtype, device=flow.device)
    return _fused_sample(vol, base + flow)


def upsample_flow(flow: torch.Tensor) -> torch.Tensor:
    """Double the resolution of a displacement field.

    Components are trilinearly interpolated at half-voxel-aligned
    positions (output voxel ``o`` reads input position ``(o + 0.5)/2 -
    0.5``, clamped) and then scaled by 2 so the displacements keep their
    physical extent in the finer grid's voxel units.
    """
    up = F.interpolate(flow[None], scale_factor=2, mode="trilinear", align_corners=False)[0]
    return up * 2.0


def compose_flows(outer: torch.Tensor, inner: torch.Tensor, *, fused: bool = False) -> torch.Tensor:
    """Chain two displacement fields' lookups into one field.

    ``result[x] = inner[x] + outer[x + inner[x]]`` with border-clamped
    trilinear sampling of ``outer``; warping a volume by the result equals
    warping it by ``outer`` and then by ``inner``.
    """
    base = identity_grid(inner.shape[1:], dtype=inner.dtype, device=inner.device)
    if fused:
        return inner + _fused_sample(outer, base + inner)
    coords = (base + inner).permute(1, 2, 3, 0)
    return inner + trilinear_sample(outer, coords).reshape(inner.shape)


def downsample_average(vol: torch.Tensor) -> torch.Tensor:
    """Halve each spatial dimension of ``vol (C, D, H, W)`` by 2x2x2 averaging."""
    return F.avg_pool3d(vol, kernel_size=2, stride=2)
