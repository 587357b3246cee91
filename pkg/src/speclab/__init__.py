"""Numerical laboratory for the spectrum of model manifolds and their perturbations."""

__version__ = "0.1.0"
