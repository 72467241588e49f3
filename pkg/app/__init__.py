# app/__init__.py
"""Self-supervised domain adaptation with consistency training, at desk scale."""

__version__ = "1.0.0"
