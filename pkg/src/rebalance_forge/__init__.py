"""Imbalance-aware synthetic-injection planning, SMA hyperparameter search,
a ProGAN shape model and a cross-validation/metrics protocol."""

from rebalance_forge.errors import RebalanceForgeError

__version__ = "0.1.0"

__all__ = ["RebalanceForgeError", "__version__"]
