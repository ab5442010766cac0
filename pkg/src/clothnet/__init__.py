"""Mass-spring cloth simulation and a physics-embedded stencil network that learns to replace it."""

from .grid import (
    ClothState,
    GridTopology,
    MaterialParams,
    Pins,
    Scene,
    Sphere,
    Trajectory,
    build_grid,
)
from .network import NetworkParams, forward_impulse, nn_step
from .physics import simulate_scene, step_semi_implicit
from .scene_io import bundled_scene, load_scene

__version__ = "0.1.0"

__all__ = [
    "ClothState",
    "GridTopology",
    "MaterialParams",
    "Pins",
    "Scene",
    "Sphere",
    "Trajectory",
    "build_grid",
    "NetworkParams",
    "forward_impulse",
    "nn_step",
    "simulate_scene",
    "step_semi_implicit",
    "bundled_scene",
    "load_scene",
]
