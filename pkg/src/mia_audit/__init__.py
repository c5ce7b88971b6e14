"""Membership-inference auditing with per-subgroup vulnerability analysis."""

__version__ = "0.1.0"
