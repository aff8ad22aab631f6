"""Multiplex spatial cell graphs with precomputed K-hop features."""

__version__ = "0.1.0"
