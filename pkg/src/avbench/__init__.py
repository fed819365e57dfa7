"""Audio-visual multi-label behavior recognition benchmark toolkit."""

__version__ = "0.1.0"
