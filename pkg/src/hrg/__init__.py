"""Hierarchical relation modeling for few-shot sequence classification."""

__version__ = "0.1.0"
