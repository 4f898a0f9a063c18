"""Surjective pseudo-invertible networks, non-linear back-projection and guided diffusion sampling."""

from .linalg import pinv, svd
from .nlbp import nlbp_exact, nlbp_gentle, nlbp_naive
from .spnn import SpnnModel

__version__ = "0.1.0"

__all__ = ["SpnnModel", "nlbp_exact", "nlbp_gentle", "nlbp_naive", "pinv", "svd"]
