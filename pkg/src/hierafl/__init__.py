"""Desk-scale simulator of federated training for nested multi-exit networks."""

__version__ = "0.1.0"
