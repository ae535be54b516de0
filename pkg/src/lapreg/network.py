"""End-to-end registration network: encoder, image pyramids, decoder."""

from __future__ import annotations

import torch
import torch.nn as nn

from . import ops
from .decoder import HEAD_DIM, DecodeResult, PyramidDecoder
from .encoder import PyramidEncoder, image_pyramid

__all__ = ["RegistrationNetwork"]


class RegistrationNetwork(nn.Module):
    """Predict the displacement field aligning a moving volume to a fixed one.

    Both volumes pass through one weight-shared encoder; their intensity
    pyramids ride along as an extra channel for the decoder's projections.
    """

    def __init__(self, widths=(8, 16, 32, 48, 48), heads=(8, 4, 2, 1, 1),
                 neighborhood: int = 3, head_dim: int = HEAD_DIM):
        super().__init__()
        self.encoder = PyramidEncoder(widths)
        self.decoder = PyramidDecoder(widths, heads, neighborhood, head_dim)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> DecodeResult:
        """Run the full pipeline on ``(1, D, H, W)`` volumes."""
        # One batched pass through the shared encoder serves both streams.
        stacked = torch.stack([moving, fixed], dim=0)
        feats = self.encoder(stacked)
        imgs = image_pyramid(stacked)
        return self.decoder(
            [f[0] for f in feats], [f[1] for f in feats],
            [p[0] for p in imgs], [p[1] for p in imgs],
        )

    @torch.no_grad()
    def register(self, moving: torch.Tensor, fixed: torch.Tensor):
        """Inference helper: returns ``(warped, flow)`` without autograd state."""
        result = self(moving, fixed)
        return ops.warp(moving, result.flow), result.flow
