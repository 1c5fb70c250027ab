"""Progressive view distribution alignment for UAV / satellite image matching."""

__version__ = "0.1.0"
