"""Shape/texture dimensionality and read-out probing for frozen convolutional encoders."""

__version__ = "0.1.0"
