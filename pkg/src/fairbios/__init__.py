"""Bias measurement and mitigation for text classification."""

__version__ = "0.1.0"
