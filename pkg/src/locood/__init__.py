"""Leave-one-class-out OOD detection benchmark engine."""
__version__ = "0.1.0"
