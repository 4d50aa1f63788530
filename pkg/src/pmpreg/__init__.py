"""Learned convolutional regularizers trained with Pontryagin-style MSA solvers."""
__version__ = "0.1.0"
