"""Neural implicit k-space reconstruction for radial dynamic MRI."""

__version__ = "0.1.0"
