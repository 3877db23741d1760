"""Keypoint estimation with confounder-scored embedding replacement, plus the
supporting autodiff engine, causal toy model and synthetic benchmark."""

__version__ = "0.1.0"
