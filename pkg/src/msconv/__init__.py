"""Multi-scale convolution engine for image super-resolution."""

__version__ = "0.1.0"
