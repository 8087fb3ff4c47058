"""Simulator for prototype-based personalized federated learning with
similarity-weighted prototype aggregation."""

__version__ = "0.1.0"
