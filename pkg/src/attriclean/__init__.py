"""Noise-agnostic cleaning of source-separation training corpora."""

from .synthdata import TARGETS

__version__ = "0.1.0"
__all__ = ["TARGETS", "__version__"]
