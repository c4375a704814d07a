"""Conditional RBM simulator for longitudinal patient data."""
__version__ = "0.1.0"
