"""Fault-tolerant master/worker task farming with pull-model agents."""

__version__ = "0.1.0"
