"""Latent state-space sequence VAE with convolutional and recurrent SSM paths."""

__version__ = "0.1.0"
