"""Training objective: windowed NCC, field smoothness, head orthogonality.

The total objective is

    L = ncc(fixed, moving after warp) + alpha * smoothness(field)
        + beta * mean over levels and streams of head orthogonality,

with every term returned separately for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import ops
from .decoder import DecodeResult
from .errors import ShapeMismatchError, ValidationError

__all__ = ["LossWeights", "ncc_loss", "smoothness_loss", "orthogonality_loss",
           "head_matrix", "total_loss"]


@dataclass(frozen=True)
class LossWeights:
    """Weights for the smoothness (alpha) and orthogonality (beta) terms."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError(f"loss weights must be nonnegative, got {self}")


def _window_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    """Zero-padded box-filter sum over a cubic window, separably."""
    pad = window // 2
    v = x[None, None]
    for axis in range(3):
        kernel = [1, 1, 1]
        kernel[axis] = window
        padding = [0, 0, 0]
        padding[axis] = pad
        v = F.avg_pool3d(v, tuple(kernel), stride=1, padding=tuple(padding))
    return v[0, 0] * float(window**3)


def ncc_loss(fixed: torch.Tensor, warped: torch.Tensor, window: int = 9) -> torch.Tensor:
    """Negative mean of squared local normalized cross correlation.

    Correlation is taken over ``window**3`` neighborhoods (zero padding,
    constant window volume); the variance product is stabilized with
    epsilon 1e-5. Values lie in [-1, 0] and reach -1 for locally affine
    intensity matches.
    """
    if fixed.shape != warped.shape:
        raise ShapeMismatchError("ncc_loss: fixed vs warped", fixed.shape, warped.shape)
    if window % 2 != 1:
        raise ValidationError(f"NCC window must be odd, got {window}")
    fixed = fixed.reshape(fixed.shape[-3:])
    warped = warped.reshape(warped.shape[-3:])
    w = float(window**3)
    f_sum = _window_sum(fixed, window)
    m_sum = _window_sum(warped, window)
    ff_sum = _window_sum(fixed * fixed, window)
    mm_sum = _window_sum(warped * warped, window)
    fm_sum = _window_sum(fixed * warped, window)
    cross = fm_sum - f_sum * m_sum / w
    f_var = ff_sum - f_sum * f_sum / w
    m_var = mm_sum - m_sum * m_sum / w
    cc = cross * cross / (f_var * m_var + 1e-5)
    return -cc.mean()


def smoothness_loss(flow: torch.Tensor) -> torch.Tensor:
    """Diffusion regularizer: mean squared forward difference of the field.

    ``flow`` is ``(3, D, H, W)``. Per axis, the squared differences are
    averaged over all valid positions and components; the three axis means
    are then averaged, so a field with unit gradient in one component
    along one axis scores 1/9.
    """
    if flow.ndim != 4 or flow.shape[0] != 3:
        raise ValidationError(f"flow must be (3, D, H, W), got {tuple(flow.shape)}")
    terms = []
    for axis in range(1, 4):
        n = flow.shape[axis]
        if n < 2:
            raise ValidationError(f"flow needs >= 2 voxels per axis, got {tuple(flow.shape)}")
        diff = flow.narrow(axis, 1, n - 1) - flow.narrow(axis, 0, n - 1)
        terms.append((diff * diff).mean())
    return sum(terms) / len(terms)


def head_matrix(qk: torch.Tensor) -> torch.Tensor:
    """Flatten per-head feature grids ``(S, d, D, H, W)`` into ``(S, u)`` rows."""
    return qk.reshape(qk.shape[0], -1)


def orthogonality_loss(w: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the normalized head Gram matrix from identity.

    Rows of ``w (S, u)`` are L2-normalized (norms floored at 1e-8, so the
    loss is invariant to positive row rescaling and finite for zero rows);
    the loss is the MSE between their Gram matrix and the S x S identity.
    """
    if w.ndim != 2:
        raise ValidationError(f"head matrix must be 2D (S, u), got {tuple(w.shape)}")
    norms = w.norm(dim=1, keepdim=True).clamp_min(1e-8)
    unit = w / norms
    gram = unit @ unit.T
    eye = torch.eye(w.shape[0], dtype=w.dtype, device=w.device)
    return ((gram - eye) ** 2).mean()


def total_loss(fixed: torch.Tensor, moving: torch.Tensor, result: DecodeResult,
               weights: LossWeights, window: int = 9):
    """Weighted training objective with a per-term breakdown.

    The orthogonality term averages :func:`orthogonality_loss` over every
    decode level's Q and K matrices (single-head levels contribute zero
    but stay in the denominator).
    """
    warped = ops.warp_fused(moving, result.flow)
    ncc = ncc_loss(fixed, warped, window)
    reg = smoothness_loss(result.flow)
    orth_terms = []
    for q, k in result.attention_qk:
        orth_terms.append(orthogonality_loss(head_matrix(q)))
        orth_terms.append(orthogonality_loss(head_matrix(k)))
    orth = sum(orth_terms) / len(orth_terms)
    total = ncc + weights.alpha * reg + weights.beta * orth
    return total, {"ncc": ncc, "reg": reg, "orth": orth, "total": total}
