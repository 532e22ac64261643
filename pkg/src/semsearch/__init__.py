"""Embedding-based semantic retrieval: training, indexing, and serving."""

__version__ = "0.1.0"
