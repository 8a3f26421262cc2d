"""Retrieval-oriented knowledge for click-through rate prediction: a
retrieval teacher, a distilled knowledge base, and backbones that use it."""

__version__ = "0.1.0"
