"""Training digit classifiers that do not rely on a planted colour bias."""

__version__ = "0.1.0"
