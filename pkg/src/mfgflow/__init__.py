"""Variational mean-field games with composed invertible flows, and
obstacle recovery from sampled trajectories via penalty-based bilevel
optimization."""

from .kernels import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
