"""Long-term disentangled pitch/rhythm representations of symbolic melodies."""

__version__ = "0.1.0"
