"""Spectral Galerkin simulation of stochastic reaction-diffusion with fading memory."""

__version__ = "0.1.0"
