"""Real-world video super-resolution toolkit, desk-scale.

Pyramidal residual optical-flow refinement, affine-parameterized deformable
alignment, bidirectional recurrent SR forward pass, and misaligned-target
rectification, with synthetic ground-truth data and brute-force oracles.
"""

from .backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
