"""Reference-based x4 super-resolution with learned cross-resolution correspondences."""

__version__ = "0.1.0"
