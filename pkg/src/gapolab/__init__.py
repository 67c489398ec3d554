"""Group-aware policy optimization on toy categorical policies."""

__version__ = "0.1.0"
