"""Audio steganography that survives source mixing and separation."""

__version__ = "0.1.0"
