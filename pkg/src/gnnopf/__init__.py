"""Unsupervised AC optimal power flow with graph neural networks."""

__version__ = "0.1.0"
