"""Gradient-guided stress testing of probabilistic forecasters and the trading strategies built on them."""

__version__ = "0.1.0"
