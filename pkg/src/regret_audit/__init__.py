"""Hindsight regret auditing for multi-asset budget allocations."""

__version__ = "0.1.0"
