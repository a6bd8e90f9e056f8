"""Self-supervised monocular depth with semantic conditioning and border ranking."""

__version__ = "0.1.0"
