"""Desk-scale multivariate time-series forecasting engine (library + CLI)."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_diff_check, no_grad, seeded_normal

__all__ = ["Tensor", "backward", "finite_diff_check", "no_grad", "seeded_normal", "__version__"]
