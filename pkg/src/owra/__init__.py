"""Open-world reliability assessment over recognition-score streams."""
__version__ = "0.1.0"
