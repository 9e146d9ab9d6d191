"""Learned population-based black-box optimization with a trainable DE family."""

__version__ = "0.1.0"
