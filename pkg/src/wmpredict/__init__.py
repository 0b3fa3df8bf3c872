"""Predict sex and age from white-matter tract cluster measures with small CNNs."""

__version__ = "0.1.0"
