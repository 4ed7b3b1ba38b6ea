"""Adaptive semantic image transmission over MIMO-OFDM, at desk scale."""

__version__ = "0.1.0"
