"""Multi-scale coordinated contrastive learning for paired volumetric
modalities, with probing, alignment, and saliency analysis."""

__version__ = "0.1.0"
