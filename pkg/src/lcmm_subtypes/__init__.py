"""Latent-class mixed models for subtyping longitudinal trajectories."""

__version__ = "0.1.0"
