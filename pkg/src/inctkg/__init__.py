"""Incremental training and evaluation of temporal knowledge graph completion models."""
__version__ = "0.1.0"
