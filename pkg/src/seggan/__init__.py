"""seggan: a desk-scale, from-scratch segmentation engine and experiment harness.

Compares four U-net-style generators (plain, gated skips, cascaded encoder
routing, encoder-side gating) and four fully connected discriminators under
one verifiable training stack: hand-written tensor kernels, tape-based
reverse-mode autodiff with a finite-difference oracle, RMSprop, and
BCE-with-logits.
"""

from .tensor import Tensor, precision, set_default_dtype
from .models import (
    GENERATOR_TOPOLOGIES,
    DISCRIMINATOR_DESIGNS,
    GeneratorSpec,
    build_combined,
    build_discriminator,
    build_generator,
)
from .training import TrainConfig, train_adversarial, train_supervised

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "precision",
    "set_default_dtype",
    "GENERATOR_TOPOLOGIES",
    "DISCRIMINATOR_DESIGNS",
    "GeneratorSpec",
    "build_generator",
    "build_discriminator",
    "build_combined",
    "TrainConfig",
    "train_supervised",
    "train_adversarial",
    "__version__",
]
