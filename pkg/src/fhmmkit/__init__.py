"""Factorial hidden Markov models: inference, fitting, confidence regions and noise tools."""

__version__ = "0.1.0"
