"""Prototype-based surgical workflow recognition on dynamic scene graphs."""
__version__ = "0.1.0"
