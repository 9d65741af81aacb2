"""Image fusion trained with a learned, meta-optimized loss."""

__version__ = "0.1.0"
