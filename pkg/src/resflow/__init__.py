"""Learning flow maps of autonomous ODEs with residual networks."""

__version__ = "0.1.0"
