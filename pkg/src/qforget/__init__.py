"""Predicting which highly viewed community Q&A questions are being forgotten."""

__version__ = "0.1.0"
