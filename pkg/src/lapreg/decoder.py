"""Local-attention transformer decoder producing deformation fields.

Per decode level, fixed-stream features become queries and moving-stream
features become keys via independent linear projections with layer norm.
Each attention head scores its voxel's query against the keys of the
n x n x n neighborhood (replicate-padded at faces) plus a learnable
per-offset bias, softmax-normalizes the scores, and converts the
resulting weights into a displacement by averaging the integer offset
vectors of the neighborhood. A 3x3x3 convolution merges the per-head
subfields into the level's residual field.

The five levels run coarse to fine: each finer level warps the moving
features by the upsampled accumulated field, estimates a residual in that
already-warped frame, and composes it onto the accumulation.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ops
from .errors import ShapeMismatchError, ValidationError

__all__ = [
    "neighborhood_offsets",
    "local_attention",
    "attention_to_offsets",
    "LocalAttentionBlock",
    "PyramidDecoder",
    "DecodeResult",
]

HEAD_DIM = 6


def neighborhood_offsets(n: int, *, dtype=torch.float32, device=None) -> torch.Tensor:
    """The ``n**3`` relative offsets of an ``n x n x n`` neighborhood.

    Ordered lexicographically over (axis0, axis1, axis2); entries span
    ``{-(n-1)/2, ..., (n-1)/2}`` and sum to the zero vector.
    """
    if n < 1 or n % 2 == 0:
        raise ValidationError(f"neighborhood size must be odd and positive, got {n}")
    r = (n - 1) // 2
    span = torch.arange(-r, r + 1, dtype=dtype, device=device)
    return torch.stack(torch.meshgrid(span, span, span, indexing="ij"), dim=-1).reshape(-1, 3)


def _neighbor_stack(k: torch.Tensor, n: int) -> torch.Tensor:
    """Gather each voxel's neighborhood keys: (S, d, D, H, W) -> (S, d, n**3, D, H, W).

    Faces are replicate-padded so every voxel sees a full neighborhood.
    Slice order matches :func:`neighborhood_offsets`.
    """
    r = (n - 1) // 2
    s, d, D, H, W = k.shape
    padded = F.pad(k, (r, r, r, r, r, r), mode="replicate")
    slices = [
        padded[:, :, i : i + D, j : j + H, l : l + W]
        for i in range(n)
        for j in range(n)
        for l in range(n)
    ]
    return torch.stack(slices, dim=2)


def local_attention(q: torch.Tensor, k: torch.Tensor, bias: torch.Tensor, n: int) -> torch.Tensor:
    """Neighborhood attention weights per head and voxel.

    ``q`` and ``k`` are ``(S, d, D, H, W)``; ``bias`` is ``(S, n**3)``.
    The logit for offset ``o`` at voxel ``x`` is ``q[x] . k[x + o] +
    bias[o]`` (no scaling), softmaxed over the ``n**3`` offsets. Returns
    ``(S, n**3, D, H, W)`` nonnegative weights that sum to 1 per voxel.
    """
    if q.shape != k.shape:
        raise ShapeMismatchError("local_attention: q vs k", q.shape, k.shape)
    neighbors = _neighbor_stack(k, n)
    logits = (q.unsqueeze(2) * neighbors).sum(dim=1)
    logits = logits + bias[:, :, None, None, None]
    return torch.softmax(logits, dim=1)


def attention_to_offsets(attn: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Displacement subfields as attention-weighted offset averages.

    ``attn`` is ``(S, n**3, D, H, W)``, ``offsets`` ``(n**3, 3)``; the
    result ``(S, 3, D, H, W)`` lies in the convex hull of the offsets.
    """
    return torch.einsum("sodhw,oc->scdhw", attn, offsets)


class LocalAttentionBlock(nn.Module):
    """One decode level: project Q/K, attend locally, emit a residual field.

    ``feat_channels`` counts the encoder features only; the raw downsampled
    intensity is concatenated as one extra input channel.
    """

    def __init__(self, feat_channels: int, heads: int, neighborhood: int = 3,
                 head_dim: int = HEAD_DIM):
        super().__init__()
        if heads < 1:
            raise ValidationError(f"head count must be positive, got {heads}")
        if neighborhood < 1 or neighborhood % 2 == 0:
            raise ValidationError(f"neighborhood size must be odd, got {neighborhood}")
        self.heads = heads
        self.head_dim = head_dim
        self.neighborhood = neighborhood
        in_ch = feat_channels + 1
        width = heads * head_dim
        self.project_q = nn.Linear(in_ch, width)
        self.project_k = nn.Linear(in_ch, width)
        self.norm_q = nn.LayerNorm(width, eps=1e-5)
        self.norm_k = nn.LayerNorm(width, eps=1e-5)
        self.position_bias = nn.Parameter(torch.zeros(heads, neighborhood**3))
        # Zero-initialized merge keeps the untrained decoder an exact identity map.
        self.merge = nn.Conv3d(3 * heads, 3, kernel_size=3, padding=1)
        nn.init.zeros_(self.merge.weight)
        nn.init.zeros_(self.merge.bias)
        self.register_buffer(
            "offsets", neighborhood_offsets(neighborhood), persistent=False
        )

    def project(self, feats: torch.Tensor, img: torch.Tensor, *, stream: str) -> torch.Tensor:
        """Concatenate features with intensity, project, and normalize per voxel.

        ``stream`` selects the query (fixed) or key (moving) parameters.
        Returns ``(heads, head_dim, D, H, W)``.
        """
        if feats.shape[1:] != img.shape[1:]:
            raise ShapeMismatchError("project: features vs image grid", feats.shape[1:], img.shape[1:])
        proj, norm = (self.project_q, self.norm_q) if stream == "q" else (self.project_k, self.norm_k)
        x = torch.cat([feats, img], dim=0).movedim(0, -1)
        if x.shape[-1] != proj.in_features:
            raise ShapeMismatchError("project: input channels", (x.shape[-1],), (proj.in_features,))
        x = norm(proj(x)).movedim(-1, 0)
        return x.reshape(self.heads, self.head_dim, *feats.shape[1:])

    def forward(self, feats_moving, feats_fixed, img_moving, img_fixed):
        """Residual field for one level plus the Q/K grids for regularization.

        Returns ``(residual (3, D, H, W), q, k)`` with ``q``/``k`` shaped
        ``(heads, head_dim, D, H, W)``.
        """
        q = self.project(feats_fixed, img_fixed, stream="q")
        k = self.project(feats_moving, img_moving, stream="k")
        attn = local_attention(q, k, self.position_bias, self.neighborhood)
        sub = attention_to_offsets(attn, self.offsets.to(q.dtype))
        residual = self.merge(sub.reshape(3 * self.heads, *sub.shape[2:]))
        return residual, q, k


class DecodeResult(NamedTuple):
    """Full-resolution field plus per-level internals, deepest level first."""

    flow: torch.Tensor
    residuals: list
    attention_qk: list


class PyramidDecoder(nn.Module):
    """Coarse-to-fine cascade of local-attention blocks over five levels.

    ``widths`` are encoder channel counts, level 1 first; ``heads`` are
    attention head counts, deepest level (5) first.
    """

    def __init__(self, widths=(8, 16, 32, 48, 48), heads=(8, 4, 2, 1, 1),
                 neighborhood: int = 3, head_dim: int = HEAD_DIM):
        super().__init__()
        if len(widths) != len(heads):
            raise ShapeMismatchError("decoder widths vs heads", (len(widths),), (len(heads),))
        heads_fine_first = tuple(int(h) for h in reversed(heads))
        self.blocks = nn.ModuleList(
            LocalAttentionBlock(int(w), h, neighborhood, head_dim)
            for w, h in zip(widths, heads_fine_first)
        )

    def forward(self, feats_moving, feats_fixed, imgs_moving, imgs_fixed) -> DecodeResult:
        """Decode five feature/image levels (fine first) into one field."""
        n_levels = len(self.blocks)
        for name, seq in (("moving features", feats_moving), ("fixed features", feats_fixed),
                          ("moving images", imgs_moving), ("fixed images", imgs_fixed)):
            if len(seq) != n_levels:
                raise ShapeMismatchError(f"decoder: {name} levels", (len(seq),), (n_levels,))

        flow = None
        residuals = []
        attention_qk = []
        for idx in reversed(range(n_levels)):
            f_m, f_f = feats_moving[idx], feats_fixed[idx]
            d_m, d_f = imgs_moving[idx], imgs_fixed[idx]
            if flow is None:
                residual, q, k = self.blocks[idx](f_m, f_f, d_m, d_f)
                flow = residual
            else:
                flow_up = ops.upsample_flow(flow)
                moving_warped = ops.warp_fused(torch.cat([f_m, d_m], dim=0), flow_up)
                residual, q, k = self.blocks[idx](
                    moving_warped[:-1], f_f, moving_warped[-1:], d_f
                )
                flow = ops.compose_flows(flow_up, residual, fused=True)
            residuals.append(residual)
            attention_qk.append((q, k))
        return DecodeResult(flow=flow, residuals=residuals, attention_qk=attention_qk)
