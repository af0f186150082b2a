"""Particle filtering for guided generation over explicit layered Markov chains."""
from ._core import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
