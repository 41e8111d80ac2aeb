"""Denoising diffusion probabilistic models on level-set submanifolds.

A manifold is the zero set of a smooth constraint ``xi``. Both Markov chains
take a Gaussian step in the tangent space and return to the manifold along
the normal space of the starting point, which gives exact transition
densities, a variational training loss and likelihood estimates.
"""

from .chain import DriftSpec, NoiseSchedule, simulate_forward, simulate_reverse
from .estimator import RiemannianDDPM
from .geometry import LevelSetManifold, dihedral, generic, special_orthogonal, sphere
from .model import ScoreNet
from .solver import NewtonConfig

__all__ = [
    "DriftSpec",
    "LevelSetManifold",
    "NewtonConfig",
    "NoiseSchedule",
    "RiemannianDDPM",
    "ScoreNet",
    "dihedral",
    "generic",
    "simulate_forward",
    "simulate_reverse",
    "special_orthogonal",
    "sphere",
]

__version__ = "0.1.0"
