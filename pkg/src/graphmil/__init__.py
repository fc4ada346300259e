"""Bag-of-embeddings classification and captioning over similarity graphs."""

__version__ = "0.1.0"
