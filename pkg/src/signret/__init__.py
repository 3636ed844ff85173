"""Sign-language video retrieval over precomputed feature sequences."""

__version__ = "0.1.0"
