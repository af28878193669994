"""Anisotropic heat equations with time-dependent SPD diffusivity: kernels,
pseudo-spectral propagation, estimate checkers and epsilon-net (very weak)
solutions."""

__version__ = "0.1.0"
