"""Recurrent encoder-decoder toolkit for video anomaly detection with single-tunnelled GRU cells."""

__version__ = "0.1.0"
