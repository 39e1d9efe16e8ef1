"""Flow-image super-resolution with quaternion spatial modeling and dynamic flow convolution."""

__version__ = "0.1.0"
