"""Federated learning simulation with element-wise personalized/shared parameter decoupling."""

__version__ = "0.1.0"
