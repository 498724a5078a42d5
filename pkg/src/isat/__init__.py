"""Integrated scheduling-and-trading simulator for V2G charging networks."""

__version__ = "0.1.0"
