"""Desk-scale lab for Bayesian inference in small transformers."""

__version__ = "0.1.0"
