"""Balanced prototypical few-shot learning for imbalanced fundus image sets."""

__version__ = "0.1.0"
