"""Gradual pruning, class rebalancing and corruption robustness for a small grid detector."""

__version__ = "0.1.0"
