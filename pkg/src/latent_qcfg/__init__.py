"""Latent-tree grammar transduction for compositional sequence-to-sequence tasks."""

__version__ = "0.1.0"
