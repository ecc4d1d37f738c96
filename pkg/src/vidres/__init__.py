"""Residual latent video models: a summary vector per video plus per-frame residual offsets."""

__version__ = "0.1.0"
