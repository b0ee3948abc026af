"""Differentiable 4D Gaussian splatting with static/dynamic decoupling.

Gaussians carry a learned dynamic coefficient w in (0, 1) that scales their
time deformation.  Training pushes w toward 0 or 1 so the scene can be split
into a static and a dynamic part.
"""

from .decouple import Partition, partition, render_split
from .render import ContractError, render, render_backward
from .scene import Camera, GaussianSet, load_scene, save_scene
from .synth import SyntheticSpec, generate
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ContractError",
    "GaussianSet",
    "Partition",
    "SyntheticSpec",
    "TrainConfig",
    "evaluate",
    "generate",
    "load_scene",
    "partition",
    "render",
    "render_backward",
    "render_split",
    "save_scene",
    "train",
]
