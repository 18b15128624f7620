"""Prototypical-part network engine: embedding, prototype layer, prediction
head, interpretability metrics, phase-structured trainer, and a Bayesian
hyperparameter sweep, all on a small float64 autodiff core."""

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]

__version__ = "0.1.0"
