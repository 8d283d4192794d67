"""Inverse design of drag-minimizing shapes with a latent diffusion model and lattice refinement."""

__version__ = "0.1.0"
