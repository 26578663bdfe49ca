"""Uncertainty-aware Kalman filtering with model-based and DNN-aided trackers."""

__version__ = "0.1.0"
