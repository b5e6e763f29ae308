"""Panoptic radiance fields lifted from noisy 2-D pseudo-labels."""

from ._accel import backend_name
from .errors import PanfieldError

__version__ = "0.1.0"

__all__ = ["PanfieldError", "backend_name", "__version__"]
