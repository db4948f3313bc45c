"""Surrogate routing for zero-shot machine-text detection on exact Markov models."""

__version__ = "0.1.0"
