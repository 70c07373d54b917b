"""Weakly supervised attention-MIL for five-grade histologic activity
scoring from bags of tile embeddings."""

__version__ = "0.1.0"
