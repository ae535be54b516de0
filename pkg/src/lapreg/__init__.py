"""Unsupervised deformable 3D registration with local-attention pyramids.

The package trains, applies, and scores a coarse-to-fine registration
network: a weight-shared pyramid encoder with squeeze-and-excitation
gating feeds a five-level local-attention transformer decoder that turns
neighborhood attention weights into displacement fields. See README.md
for the CLI and the demos/ directory for narrative walkthroughs.
"""

from .grid import (
    DisplacementField,
    Volume,
    compose,
    jacobian_det,
    trilinear_sample,
    upsample_field,
    warp,
    warp_labels,
)
from .losses import LossWeights, ncc_loss, orthogonality_loss, smoothness_loss, total_loss
from .metrics import (
    LabelMap,
    MetricsReport,
    assd,
    dsc,
    endpoint_error,
    evaluate_pair,
    neg_jacobian_fraction,
)
from .network import RegistrationNetwork
from .synth import SynthPair, generate_dataset, generate_pair, generate_translation_pair
from .train import TrainConfig, build_model, load_model, register_pair, train

__version__ = "0.1.0"

__all__ = [
    "Volume", "DisplacementField", "warp", "warp_labels", "compose",
    "upsample_field", "trilinear_sample", "jacobian_det",
    "LossWeights", "ncc_loss", "smoothness_loss", "orthogonality_loss", "total_loss",
    "LabelMap", "MetricsReport", "dsc", "assd", "neg_jacobian_fraction",
    "endpoint_error", "evaluate_pair",
    "RegistrationNetwork",
    "SynthPair", "generate_pair", "generate_translation_pair", "generate_dataset",
    "TrainConfig", "build_model", "train", "register_pair", "load_model",
    "__version__",
]
