"""Numerical laboratory for the linear stability of SGD, randomly perturbed
SGD, and sharpness-aware minimization around minima.

The package is organized as a library (spectra, quadratic, dynamics, relu2,
sweep) plus a CLI (`stablab`) whose report path writes CSV/JSON tables and
matplotlib figures.
"""

__version__ = "0.1.0"

from .errors import ConvergenceError, InputError

__all__ = ["ConvergenceError", "InputError", "__version__"]
