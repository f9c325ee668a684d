"""Box-prompted joint caption and mask generation on a synthetic shape world."""

__version__ = "0.1.0"
