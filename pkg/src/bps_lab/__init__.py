"""Behavior policy search for data-efficient off-policy evaluation."""

__version__ = "0.1.0"
