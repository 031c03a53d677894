"""Turn raw point clouds into textured 2D Gaussian disk splats."""

__version__ = "0.1.0"
