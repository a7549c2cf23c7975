"""Pretraining a bidirectional transformer on tokenized channel frequency responses."""

__version__ = "0.1.0"
