"""Soft multilabel reference learning for unsupervised cross-view embeddings."""

from mar.errors import MarError

__version__ = "0.1.0"

__all__ = ["MarError", "__version__"]
