"""Joint scene classification and weakly supervised event detection toolkit."""

__version__ = "0.1.0"
