"""Stablecoin-to-crypto volatility transmission toolkit."""

__version__ = "0.1.0"
