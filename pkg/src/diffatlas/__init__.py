"""Layered-atlas video editing with a toy diffusion model, at desk scale."""

__version__ = "0.1.0"
