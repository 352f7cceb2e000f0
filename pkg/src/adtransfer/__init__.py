"""Importance-weighted adversarial autoencoder for anomaly detection under domain shift."""

__version__ = "0.1.0"
