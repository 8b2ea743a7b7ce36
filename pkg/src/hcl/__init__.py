"""Hierarchical contrastive learning for unsupervised graph representation."""

__version__ = "0.1.0"
