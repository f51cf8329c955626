"""Deterministic federated-learning poisoning simulator."""

__version__ = "0.1.0"
