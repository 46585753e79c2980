"""resmap: synthetic residue scenes, probabilistic residue segmentation, and
carbon accounting over a small custom raster stack."""

__version__ = "0.1.0"

from .backend import BACKEND_NAME

__all__ = ["BACKEND_NAME", "__version__"]
