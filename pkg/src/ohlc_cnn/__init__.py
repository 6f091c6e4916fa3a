"""From-scratch 1-D CNN engine and data pipeline for OHLC movement classification."""

__version__ = "0.1.0"
