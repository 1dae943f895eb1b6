"""Symbolic regression by search in a learned generative latent space."""

__version__ = "0.1.0"
