"""Penalty-based bi-level machine unlearning with reference baselines,
evaluation metrics and closed-form convergence checks."""

__version__ = "0.1.0"
