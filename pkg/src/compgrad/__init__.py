"""Compressed and accelerated gradient methods on simulated multi-node problems."""

from .compressors import Compressor, dithering, identity, natural, random_k
from .harness import ExperimentSpec, run, solve_reference
from .objectives import Objective, logistic_objective

__all__ = [
    "Compressor",
    "ExperimentSpec",
    "Objective",
    "dithering",
    "identity",
    "logistic_objective",
    "natural",
    "random_k",
    "run",
    "solve_reference",
]
__version__ = "0.1.0"
