"""Deterministic federated-learning simulator with knowledge-anchor training."""

__version__ = "0.1.0"
