"""Point/box embeddings for knowledge-aware top-K recommendation."""

__version__ = "0.1.0"
