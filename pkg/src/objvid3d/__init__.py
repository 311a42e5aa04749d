"""Object-centric 3D generative video model with differentiable voxel and mesh renderers."""

__version__ = "0.1.0"
