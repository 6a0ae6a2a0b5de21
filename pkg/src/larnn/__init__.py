"""LARNN: LSTM cells that attend over a window of their own past cell states."""

__version__ = "0.1.0"
