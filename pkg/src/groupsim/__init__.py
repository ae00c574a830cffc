"""Group membership and cluster view management in a deterministic simulator."""

__version__ = "0.1.0"
