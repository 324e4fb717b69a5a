"""Adaptive quantum-safe key establishment for networks where only some nodes have QKD."""

from .levels import SecurityLevel

__all__ = ["SecurityLevel"]
__version__ = "0.1.0"
