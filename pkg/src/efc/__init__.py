"""Exemplar-free class-incremental learning with Elastic Feature Consolidation."""

__version__ = "0.1.0"
