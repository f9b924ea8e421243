"""Federated-learning simulation over synthetic non-IID multi-label clients."""

__version__ = "0.1.0"
