"""Desk-scale gap-aware preference optimization for a toy video diffusion model."""

__version__ = "0.1.0"
