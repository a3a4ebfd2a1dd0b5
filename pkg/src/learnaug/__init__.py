"""Joint training of small classifiers and learnable augmentation distributions."""

__version__ = "0.1.0"
