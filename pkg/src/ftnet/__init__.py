"""Fault-injection fuzzing for network peers."""

__version__ = "0.1.0"
