"""Multiscale finite-strain poroelasticity with cell problems and learned surrogates."""
from .exceptions import *  # noqa: F401,F403
from .material import MaterialParams

__version__ = "0.1.0"
__all__ = ["MaterialParams", "__version__"]
