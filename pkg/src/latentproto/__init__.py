"""Few-shot segmentation with latent-class mining and prototype rectification."""

__version__ = "0.1.0"
