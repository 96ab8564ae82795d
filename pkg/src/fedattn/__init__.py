"""Scrambled distributed attention and a simulated federated RAG pipeline."""

__version__ = "0.1.0"
