"""Contrastive-regularized focal loss for imbalanced longitudinal tabular data."""

__version__ = "0.1.0"
