"""Doubly and multiply robust estimators of longitudinal regime means."""

__version__ = "0.1.0"
