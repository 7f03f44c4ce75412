"""Continual multi-fidelity Bayesian optimization with transferable
surrogate parameters, benchmarked on multi-cell uplink power control."""

__version__ = "0.1.0"
