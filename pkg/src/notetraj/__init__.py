"""Note-augmented patient trajectory prediction."""

__version__ = "0.1.0"
