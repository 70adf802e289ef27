"""Continual test-time adaptation engine with online domain generalization."""

__version__ = "0.1.0"
