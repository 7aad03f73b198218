"""Hybrid nucleus classification: object-level features fused with a shallow
CNN, classified by a small MLP."""

__version__ = "0.1.0"
