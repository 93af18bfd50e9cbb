from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from crowd_forecast.data import scene_from_tracks, window_scene
from crowd_forecast.networks import Architecture, ModelParams
from crowd_forecast.rollout import ModelSettings, SocialPhysicsModel
from crowd_forecast.types import CoefficientOverride, FactorKind, Scene, Window

DT = 0.4


def linear_tracks(agents: Dict[int, Tuple[Sequence[float], Sequence[float]]], frames: int = 20,
                  dt: float = DT, first_frame: int = 0) -> Dict[int, Dict[int, np.ndarray]]:
    """agent id -> (start, velocity) as uniform straight-line tracks."""
    tracks = {}
    for agent_id, (start, velocity) in agents.items():
        start = np.asarray(start, dtype=np.float64)
        velocity = np.asarray(velocity, dtype=np.float64)
        tracks[agent_id] = {first_frame + index: start + velocity * dt * index for index in range(frames)}
    return tracks


def linear_scene(agents: Dict[int, Tuple[Sequence[float], Sequence[float]]], frames: int = 20,
                 obstacles: Optional[np.ndarray] = None, name: str = "toy") -> Scene:
    return scene_from_tracks(linear_tracks(agents, frames), dt=DT, obstacles=obstacles, name=name)


def toy_window(neighbors: bool = True, obstacles: bool = True) -> Window:
    """One 8/12 window of an agent walking right, optionally with a parallel neighbor and one obstacle."""
    agents = {0: ((0.0, 0.0), (10.0, 0.0))}
    if neighbors:
        agents[1] = ((5.0, 30.0), (9.0, -1.0))
    points = np.array([[40.0, -25.0]]) if obstacles else None
    return window_scene(linear_scene(agents, obstacles=points), radius=100.0)[0]


def compact_params(seed: int = 0) -> ModelParams:
    return ModelParams.initialize(np.random.default_rng(seed), Architecture.named("compact"))


def compact_model(seed: int = 0, phases: Tuple[str, ...] = ("1",), **settings) -> SocialPhysicsModel:
    return SocialPhysicsModel(compact_params(seed), ModelSettings(**settings), phases)


def goal_only_model(k_goal: float, std: float = 0.0) -> SocialPhysicsModel:
    """A parameter-free model with a fixed goal coefficient and no interactions."""
    settings = ModelSettings(use_collision=False, use_environment=False, epistemic=False,
                             overrides={FactorKind.GOAL: CoefficientOverride(k_goal, std)})
    return SocialPhysicsModel(None, settings)
