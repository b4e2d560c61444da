"""Conditional flow matching in codec latent space for binary segmentation."""

__version__ = "0.1.0"
