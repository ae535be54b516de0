"""Weight-sharing pyramid feature encoder with channel-wise attention.

One encoder instance serves both the moving and the fixed image: calling
it twice with the same parameters realizes the dual-stream, weight-shared
design. Each of the five stages is two conv blocks (3x3x3 convolution,
instance norm, LeakyReLU) followed by a squeeze-and-excitation gate;
stages 2-5 halve the spatial dimensions with a stride-2 first convolution.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GridSizeError, ShapeMismatchError
from .ops import downsample_average

__all__ = ["ConvBlock", "SqueezeExcite", "PyramidEncoder", "image_pyramid", "check_grid_shape"]

NUM_LEVELS = 5
LEAKY_SLOPE = 0.2


def check_grid_shape(shape) -> None:
    """Reject grids whose dimensions cannot be halved cleanly five times."""
    if any(s % 16 != 0 for s in shape):
        raise GridSizeError(
            f"grid shape {tuple(shape)} must be divisible by 16 along every axis; "
            "pad or crop the input first (see lapreg.io.preprocess)"
        )


class ConvBlock(nn.Module):
    """3x3x3 convolution -> instance norm -> LeakyReLU(0.2)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm3d(out_channels, eps=1e-5, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-4] != self.conv.in_channels:
            raise ShapeMismatchError(
                "conv block input channels", (x.shape[-4],), (self.conv.in_channels,)
            )
        return F.leaky_relu(self.norm(self.conv(x)), negative_slope=LEAKY_SLOPE)


class SqueezeExcite(nn.Module):
    """Channel gate from globally pooled features: linear -> ReLU -> linear -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-3, -2, -1))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)[..., None, None, None]


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.block1 = ConvBlock(in_channels, out_channels, stride=stride)
        self.block2 = ConvBlock(out_channels, out_channels)
        self.excite = SqueezeExcite(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.excite(self.block2(self.block1(x)))


class PyramidEncoder(nn.Module):
    """Five-stage feature pyramid over a single-channel volume.

    ``widths[t]`` is the channel count of level ``t+1``; level 1 keeps the
    input resolution and each further level halves it.
    """

    def __init__(self, widths=(8, 16, 32, 48, 48)):
        super().__init__()
        if len(widths) != NUM_LEVELS:
            raise ShapeMismatchError("encoder widths", (len(widths),), (NUM_LEVELS,))
        self.widths = tuple(int(w) for w in widths)
        stages = []
        in_ch = 1
        for level, out_ch in enumerate(self.widths):
            stages.append(EncoderStage(in_ch, out_ch, stride=1 if level == 0 else 2))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, vol: torch.Tensor) -> list[torch.Tensor]:
        """Encode a ``(1, D, H, W)`` volume (or a batch of them) into five
        feature grids, fine to coarse."""
        check_grid_shape(vol.shape[-3:])
        features = []
        x = vol
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


def image_pyramid(vol: torch.Tensor) -> list[torch.Tensor]:
    """Five-level intensity pyramid: level 1 is the input, each next level
    is a 2x2x2 average of the previous, matching the encoder's grids."""
    check_grid_shape(vol.shape[-3:])
    levels = [vol]
    for _ in range(NUM_LEVELS - 1):
        levels.append(downsample_average(levels[-1]))
    return levels
