"""Attention-based interatomic potential on invariant scalar features.

Submodules: tensor (autodiff engine), geometry (systems + radius graphs),
featurization (spherical harmonics / BOO / RBF), model (the network),
training (loss + optimizer loop), data (synthetic labels + extended XYZ),
diagnostics (equivariance, scaling, benchmark, MD), cli (command line).
"""

from .geometry import AtomicSystem, NeighborGraph, Rotation, build_neighbor_graph
from .model import (ModelConfig, ModelParams, Prediction, forward, parameter_audit,
                    tiny_config, small_toy_config, medium_toy_config)
from .tensor import ComputationTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AtomicSystem", "NeighborGraph", "Rotation", "build_neighbor_graph",
    "ModelConfig", "ModelParams", "Prediction", "forward", "parameter_audit",
    "tiny_config", "small_toy_config", "medium_toy_config",
    "ComputationTape", "Tensor", "__version__",
]
