# Sparse-view SDF Reconstruction Package

__version__ = "0.3.0"
