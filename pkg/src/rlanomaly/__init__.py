"""Mahalanobis and robust-Mahalanobis state anomaly detection for RL policies."""

__version__ = "0.1.0"
