"""Repulsive multi-head attention: heads as particles moved by Stein-type samplers."""

__version__ = "0.1.0"
