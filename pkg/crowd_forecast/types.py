from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .exceptions import CrowdForecastContractError, CrowdForecastNumericError


class _ValidatedEnum(Enum):

    @classmethod
    def validate(cls, value: Union[str, "_ValidatedEnum"]) -> None:
        """
        Validates a value against the enum values.

        Parameters:
            value: the value to validate. Must be a str or a member of the enum.

        Raises:
            TypeError: if the argument is not a str or enum member.
            ValueError: if the argument is not a valid enum value.
        """
        if not isinstance(value, (str, cls)):
            raise TypeError(
                f"Invalid argument type: {type(value)}. "
                f"Expected str or {cls.__name__}"
            )
        try:
            cls(value)
        except ValueError as exc:
            raise ValueError(
                f"Invalid {cls.__name__}: {value}. "
                f"Valid options are: {[t.value for t in cls]}"
            ) from exc

    @classmethod
    def parse(cls, value: Union[str, "_ValidatedEnum"]):
        cls.validate(value)
        return cls(value)


class FactorKind(_ValidatedEnum):
    GOAL = "goal"
    COLLISION = "collision"
    ENVIRONMENT = "environment"


class ForceMode(_ValidatedEnum):
    STOCHASTIC = "stochastic"
    MEAN = "mean"


class PredictionMode(_ValidatedEnum):
    STANDARD = "standard"
    ULTRA = "ultra"
    DETERMINISTIC = "deterministic"


class GoalMode(_ValidatedEnum):
    GROUND_TRUTH = "ground_truth"
    FILE = "file"
    ENDPOINT_GAUSSIAN = "endpoint_gaussian"


class Activation(_ValidatedEnum):
    RELU = "relu"
    NONE = "none"


class TrainingPhase(_ValidatedEnum):
    ALEATORIC = "1"
    EPISTEMIC = "2"
    ALL = "all"


class InputSpace(_ValidatedEnum):
    PIXEL = "pixel"
    WORLD = "world"


@dataclass(frozen=True, eq=False)
class AgentState:
    """Position (pixels) and velocity (pixels/second) of one pedestrian at one frame."""
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self) -> None:
        position = np.array(self.position, dtype=np.float64).reshape(2)
        velocity = np.array(self.velocity, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(position)) and np.all(np.isfinite(velocity))):
            raise CrowdForecastNumericError(
                "Agent state has non-finite components",
                {"position": position.tolist(), "velocity": velocity.tolist()})
        position.setflags(write=False)
        velocity.setflags(write=False)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "velocity", velocity)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "AgentState":
        return cls(vector[:2], vector[2:4])


@dataclass(frozen=True)
class NeighborSet:
    agent_id: int
    frame_id: int
    neighbor_ids: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Scene:
    """
    Frame-indexed agent states plus the environment they move in.

    `states` maps frame id -> agent id -> AgentState and only holds agents with at
    least one full window of frames; shorter tracks live in `dynamic_obstacles`.
    """
    frame_ids: Tuple[int, ...]
    states: Mapping[int, Mapping[int, AgentState]]
    obstacles: np.ndarray
    dynamic_obstacles: Mapping[int, np.ndarray]
    homography: np.ndarray
    bounds: Tuple[float, float, float, float]
    dt: float = 0.4
    frame_step: int = 1
    name: str = "scene"
    metadata: Mapping = field(default_factory=dict)

    def agent_ids(self) -> List[int]:
        ids = set()
        for frame_id in self.frame_ids:
            ids.update(self.states.get(frame_id, {}).keys())
        return sorted(ids)

    def track(self, agent_id: int) -> Dict[int, AgentState]:
        return {frame_id: self.states[frame_id][agent_id]
                for frame_id in self.frame_ids
                if agent_id in self.states.get(frame_id, {})}

    def obstacles_at(self, frame_id: int) -> np.ndarray:
        dynamic = self.dynamic_obstacles.get(frame_id)
        if dynamic is None or len(dynamic) == 0:
            return self.obstacles
        if len(self.obstacles) == 0:
            return dynamic
        return np.vstack([self.obstacles, dynamic])


@dataclass(frozen=True, eq=False)
class Window:
    """One observed/future sample of a single agent with its neighbor and obstacle context."""
    window_id: str
    agent_id: int
    frame_ids: Tuple[int, ...]
    observed: Tuple[AgentState, ...]
    future: np.ndarray
    destination: np.ndarray
    neighbor_ids: Tuple[Tuple[int, ...], ...]
    neighbor_windows: Tuple[Tuple[AgentState, ...], ...]
    static_obstacles: np.ndarray
    dynamic_obstacles: Tuple[np.ndarray, ...]
    dt: float = 0.4
    index: int = 0

    @property
    def horizon(self) -> int:
        return len(self.future)

    def neighbor_matrix(self, frame_index: int) -> np.ndarray:
        states = self.neighbor_windows[frame_index]
        if not states:
            return np.zeros((0, 4))
        return np.stack([state.as_vector() for state in states])

    def obstacles_at(self, frame_index: int) -> np.ndarray:
        dynamic = self.dynamic_obstacles[frame_index]
        if len(dynamic) == 0:
            return self.static_obstacles
        if len(self.static_obstacles) == 0:
            return dynamic
        return np.vstack([self.static_obstacles, dynamic])

    def observed_positions(self) -> np.ndarray:
        return np.stack([state.position for state in self.observed])


@dataclass(frozen=True)
class CoefficientOverride:
    """Fixed Gaussian for a force coefficient that replaces the learned one."""
    mean: float
    std: float = 0.0


@dataclass(frozen=True, eq=False)
class ForceDistribution:
    """A factor's base vector and the Gaussian of its coefficient; a sample is base * k."""
    kind: FactorKind
    base: np.ndarray
    k_mean: float
    k_std: float

    @property
    def mean_force(self) -> np.ndarray:
        return self.base * self.k_mean

    @property
    def axis_std(self) -> np.ndarray:
        return np.abs(self.base) * self.k_std


@dataclass(frozen=True, eq=False)
class StepOutput:
    position: np.ndarray
    velocity: np.ndarray
    coefficients: Mapping[FactorKind, np.ndarray]
    residual: np.ndarray

    @property
    def state(self) -> AgentState:
        return AgentState(self.position, self.velocity)


@dataclass(frozen=True)
class PriorSpec:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise CrowdForecastContractError(f"Prior sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class LossBreakdown:
    log_q: float
    log_prior: float
    log_likelihood: float

    @property
    def total(self) -> float:
        return self.log_q - self.log_likelihood - self.log_prior


@dataclass(frozen=True, eq=False)
class PredictionSet:
    window_id: str
    goal_mode: str
    samples: np.ndarray
    factor_records: Tuple[Tuple[ForceDistribution, ...], ...] = ()

    def to_record(self) -> Dict:
        return {
            "window_id": self.window_id,
            "goal_mode": self.goal_mode,
            "samples": self.samples.tolist(),
        }


@dataclass(frozen=True, eq=False)
class FactorExplanation:
    kind: FactorKind
    mean: np.ndarray
    std: np.ndarray
    grid: np.ndarray
    extent: Tuple[float, float, float, float]

    def to_record(self) -> Dict:
        return {
            "kind": self.kind.value,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "grid": self.grid.tolist(),
            "extent": list(self.extent),
        }


@dataclass(frozen=True)
class IntervalCollisions:
    t_start: float
    t_end: float
    agents: int
    collisions: int

    @property
    def pairs(self) -> int:
        return self.agents * (self.agents - 1) // 2

    @property
    def rate(self) -> float:
        if self.agents < 2:
            return 0.0
        return self.collisions / self.pairs


@dataclass(frozen=True)
class CollisionReport:
    intervals: Tuple[IntervalCollisions, ...]

    @property
    def mean_rate(self) -> float:
        if not self.intervals:
            return 0.0
        return float(np.mean([interval.rate for interval in self.intervals]))

    @property
    def mean_collisions(self) -> float:
        if not self.intervals:
            return 0.0
        return float(np.mean([interval.collisions for interval in self.intervals]))

    @property
    def total_collisions(self) -> int:
        return sum(interval.collisions for interval in self.intervals)

    def to_record(self) -> Dict:
        return {
            "intervals": [
                {
                    "t_start": interval.t_start,
                    "t_end": interval.t_end,
                    "N": interval.agents,
                    "M": interval.collisions,
                    "rate": interval.rate,
                }
                for interval in self.intervals
            ],
            "mean_rate": self.mean_rate,
            "mean_collisions": self.mean_collisions,
            "total_collisions": self.total_collisions,
        }


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict
    seed: Optional[int]
    input_digests: Dict[str, str]
    artifacts: List[str]
    started_at: str
    wall_clock_seconds: float = 0.0
