"""Rain-rate retrieval from commercial microwave link signal levels."""

__version__ = "0.1.0"
