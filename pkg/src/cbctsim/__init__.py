"""Pseudo-CBCT artifact simulation and conditional latent diffusion
enhancement on synthetic phantoms."""

__version__ = "0.1.0"
