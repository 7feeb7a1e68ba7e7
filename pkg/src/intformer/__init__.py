"""Time-embedded attention models for intersection crash-likelihood prediction."""

__version__ = "0.1.0"
