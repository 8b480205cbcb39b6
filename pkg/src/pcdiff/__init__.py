"""Conditional point-cloud diffusion for completion, upsampling, denoising and colourisation."""

__version__ = "0.1.0"
