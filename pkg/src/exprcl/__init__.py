"""Contrastive expression-representation learning with temporal positives,
same-identity hard negatives, face-swap augmentation and eye/mouth
false-negative cancellation."""

__version__ = "0.1.0"
