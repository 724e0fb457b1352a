"""Botnet formation and optimal patching in D2D wireless IoT networks."""

__version__ = "0.1.0"
