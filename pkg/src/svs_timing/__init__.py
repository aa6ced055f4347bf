"""Score-to-frame timing for singing voice synthesis with a desk-scale attention model."""

__version__ = "0.1.0"
