"""Kalman filter covariance collapse onto the unstable-neutral subspace."""

__version__ = "0.1.0"
