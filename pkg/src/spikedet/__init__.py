"""Directly trained spiking two-stage object detector at desk scale."""

__version__ = "0.1.0"
