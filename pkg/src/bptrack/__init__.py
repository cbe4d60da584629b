"""Belief-propagation multiobject tracker with learnable motion and
measurement models, plus the simulator, trainer and evaluation harness."""

__version__ = "0.1.0"

from .numerics import GaussianState, ParticleSet, Rng, SigmaPointSet, UTParams
from .association import AssociationMarginals, AssociationProblem
from .simulator import Scene, ScenarioConfig, simulate_scene
from .tracker import PoState, TrackerConfig, TrackRecord, run_scene

__all__ = [
    "AssociationMarginals",
    "AssociationProblem",
    "GaussianState",
    "ParticleSet",
    "PoState",
    "Rng",
    "Scene",
    "ScenarioConfig",
    "SigmaPointSet",
    "TrackRecord",
    "TrackerConfig",
    "UTParams",
    "run_scene",
    "simulate_scene",
    "__version__",
]
