"""Latent-variable estimation from scratch: EM, mean-field and amortized VI, diffusion models."""

__version__ = "0.1.0"
