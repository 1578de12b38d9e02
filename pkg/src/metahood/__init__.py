"""Filesystem metadata mirror with on-the-fly statistics and a policy engine."""

__version__ = "0.1.0"
