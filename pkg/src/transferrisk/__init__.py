"""Exact risk asymptotics for ridgeless transfer through a linear representation."""

__version__ = "0.1.0"
