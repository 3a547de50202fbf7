"""Estimators for modified treatment policies that depend on the natural treatment history."""
__version__ = "0.1.0"
