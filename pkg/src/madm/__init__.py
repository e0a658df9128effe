"""Modality adaptation with diffusion backbones: DPLG pseudo-labels and LPLR latent regression."""

__version__ = "0.1.0"
