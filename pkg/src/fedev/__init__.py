"""Federated active learning simulator with epistemic-variation selection."""

__version__ = "0.1.0"
