"""Learning-based NMPC with Gaussian-process black-box vehicle dynamics."""

from .core import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
