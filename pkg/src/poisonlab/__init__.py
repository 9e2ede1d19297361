"""Data-constrained backdoor attacks guided by a frozen image-text encoder."""

__version__ = "0.1.0"
