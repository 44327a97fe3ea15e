"""Segmentation-guided latent diffusion for longitudinal brain phantoms."""

__version__ = "0.1.0"
