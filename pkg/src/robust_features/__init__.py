"""Robust and non-robust features: Gaussian robust-MLE theory and dataset surgery."""
__version__ = "0.1.0"
