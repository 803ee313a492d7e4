"""Motion-adaptive sparse control nodes for dynamic Gaussian scenes."""

__version__ = "0.1.0"
