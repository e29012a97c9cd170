"""Recovery of convex polygonal obstacles from a few high-frequency far-field measurements."""

__version__ = "0.1.0"
