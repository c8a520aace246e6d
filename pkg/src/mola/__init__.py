"""Desk-scale latent-action imitation pipeline on a synthetic 2D world."""

__version__ = "0.1.0"
