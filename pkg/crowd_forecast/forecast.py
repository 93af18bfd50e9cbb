"""
Prediction protocols, displacement metrics, goal modes and explanations.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import SECONDS_PER_FRAME
from .data import frame_step_of, pixel_to_world, write_text_atomic
from .exceptions import (
    CrowdForecastContractError,
    CrowdForecastLookupError,
    CrowdForecastParseError,
    CrowdForecastShapeError,
    CrowdForecastUsageError,
)
from .dynamics import summarize
from .rollout import SocialPhysicsModel, rollout, warm_start, window_context
from .simulator import count_collisions
from .types import (
    CollisionReport,
    FactorExplanation,
    ForceMode,
    GoalMode,
    IntervalCollisions,
    PredictionSet,
    Window,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEGENERATE_STD = 1e-12
EXTENT_STDS = 5.0


def ade(prediction: np.ndarray, truth: np.ndarray) -> float:
    """Mean Euclidean distance over the horizon."""
    prediction, truth = _pair(prediction, truth)
    return float(np.mean(np.linalg.norm(prediction - truth, axis=1)))


def fde(prediction: np.ndarray, truth: np.ndarray) -> float:
    """Euclidean distance at the final position."""
    prediction, truth = _pair(prediction, truth)
    return float(np.linalg.norm(prediction[-1] - truth[-1]))


def best_of(samples: Iterable[np.ndarray], truth: np.ndarray) -> Tuple[float, float]:
    """Minimum ADE and minimum FDE over a sample set, taken independently."""
    scores = [(ade(sample, truth), fde(sample, truth)) for sample in samples]
    if not scores:
        raise CrowdForecastContractError("best_of needs at least one sample")
    return min(score[0] for score in scores), min(score[1] for score in scores)


def _pair(prediction: np.ndarray, truth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    prediction = np.asarray(prediction, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if prediction.shape != truth.shape or len(truth) == 0:
        raise CrowdForecastShapeError(f"Prediction {prediction.shape} and truth {truth.shape} differ")
    return prediction, truth


def _goals(goal: np.ndarray, count: int) -> np.ndarray:
    goal = np.asarray(goal, dtype=np.float64)
    if goal.shape == (2,):
        return np.repeat(goal[None], count, axis=0)
    if goal.shape != (count, 2):
        raise CrowdForecastShapeError(f"Expected one goal or {count} goals, got shape {goal.shape}")
    return goal


def _epistemic(model: SocialPhysicsModel, epistemic: Optional[bool]) -> bool:
    return model.epistemic_active if epistemic is None else epistemic


def predict_standard(model: SocialPhysicsModel, window: Window, goal: np.ndarray, samples: int = 20,
                     rng: Optional[np.random.Generator] = None, epistemic: Optional[bool] = None,
                     goal_mode: str = GoalMode.GROUND_TRUTH.value) -> PredictionSet:
    """
    Draws `samples` independent full rollouts.

    Parameters:
        model: the trained model.
        window: the window to forecast.
        goal: one destination, or one per sample (samples, 2).
        samples: number of trajectories K.
        rng: sample k uses the k-th child stream of this generator.
        epistemic: sample CVAE residuals; defaults to whether the model completed phase 2.
        goal_mode: recorded in the result.

    Returns:
        PredictionSet: K trajectories and the factor records of the first one.
    """
    if samples < 1:
        raise CrowdForecastContractError(f"samples must be >= 1, got {samples}")
    rng = rng if rng is not None else np.random.default_rng(0)
    goals = _goals(goal, samples)
    use_epistemic = _epistemic(model, epistemic)
    trajectories, records = [], ()
    for index, stream in enumerate(rng.spawn(samples)):
        result = rollout(model, window, goals[index], stream, epistemic=use_epistemic)
        trajectories.append(result.positions)
        if index == 0:
            records = result.distributions()
    return PredictionSet(window.window_id, goal_mode, np.array(trajectories), records)


def predict_deterministic(model: SocialPhysicsModel, window: Window, goal: np.ndarray,
                          goal_mode: str = GoalMode.GROUND_TRUTH.value) -> PredictionSet:
    """One rollout with every coefficient at its mean and no residual."""
    result = rollout(model, window, goal, np.random.default_rng(0), mode=ForceMode.MEAN)
    return PredictionSet(window.window_id, goal_mode, result.positions[None], result.distributions())


def predict_ultra(model: SocialPhysicsModel, window: Window, ground_truth_future: Optional[np.ndarray],
                  goals: np.ndarray, positions: int = 15, rng: Optional[np.random.Generator] = None,
                  epistemic: Optional[bool] = None, goal_mode: str = GoalMode.GROUND_TRUTH.value) -> PredictionSet:
    """
    Per-step candidate sampling scored against the ground truth (evaluation only).

    For each goal, every step draws `positions` candidate next states from the
    same network outputs, keeps the candidate closest to the true position at
    that step and continues from it.

    Raises:
        CrowdForecastContractError: if the ground truth is missing or has the wrong length.
    """
    if ground_truth_future is None:
        raise CrowdForecastContractError("Ultra sampling needs the ground-truth future")
    truth = np.asarray(ground_truth_future, dtype=np.float64).reshape(-1, 2)
    if len(truth) != window.horizon:
        raise CrowdForecastContractError(f"Ground truth has {len(truth)} positions, expected {window.horizon}")
    if positions < 1:
        raise CrowdForecastContractError(f"positions must be >= 1, got {positions}")
    goals = np.asarray(goals, dtype=np.float64).reshape(-1, 2)
    rng = rng if rng is not None else np.random.default_rng(0)
    use_epistemic = _epistemic(model, epistemic)
    trajectories = []
    for goal, stream in zip(goals, rng.spawn(len(goals))):
        recurrent, _ = warm_start(model, window)
        state = window.observed[-1]
        path = list(window.observed_positions())
        for step in range(window.horizon):
            neighbors, obstacles = window_context(window, step)
            plan = model.evaluate(state, goal, window.horizon - step, neighbors, obstacles, recurrent, stream)
            history = np.array(path)
            candidates = [model.draw(plan, stream, history=history, epistemic=use_epistemic).output
                          for _ in range(positions)]
            errors = [np.linalg.norm(candidate.position - truth[step]) for candidate in candidates]
            state = candidates[int(np.argmin(errors))].state
            recurrent = plan.recurrent
            path.append(state.position)
        trajectories.append(np.array(path[len(window.observed):]))
    return PredictionSet(window.window_id, goal_mode, np.array(trajectories).reshape(len(goals), -1, 2))


def predict_constant_velocity(window: Window) -> np.ndarray:
    """Extrapolates the last observed velocity over the horizon."""
    last = window.observed[-1]
    steps = np.arange(1, window.horizon + 1)[:, None]
    return last.position + steps * last.velocity * window.dt


@dataclass(frozen=True, eq=False)
class EndpointGaussian:
    """Gaussian over displacements from the last observed position to the destination."""
    mean: np.ndarray
    covariance: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.covariance)

    def to_record(self) -> Dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_record(cls, record: Mapping) -> "EndpointGaussian":
        return cls(np.array(record["mean"], dtype=np.float64), np.array(record["covariance"], dtype=np.float64))


def fit_endpoint_gaussian(windows: Sequence[Window]) -> EndpointGaussian:
    if not windows:
        raise CrowdForecastContractError("Fitting the endpoint Gaussian needs at least one window")
    displacements = np.array([window.destination - window.observed[-1].position for window in windows])
    mean = displacements.mean(axis=0)
    centered = displacements - mean
    return EndpointGaussian(mean, centered.T @ centered / len(displacements))


def goal_mode(mode: Union[str, GoalMode], window: Window, rng: Optional[np.random.Generator] = None,
              goals: Optional[Mapping[str, Sequence[float]]] = None,
              endpoint: Optional[EndpointGaussian] = None) -> np.ndarray:
    """
    Destination for a window under a goal mode.

    Raises:
        CrowdForecastLookupError: if file mode has no entry for the window.
        CrowdForecastContractError: if the mode's input (goals or endpoint fit) is missing.
    """
    mode = GoalMode.parse(mode)
    if mode is GoalMode.GROUND_TRUTH:
        return np.array(window.destination)
    if mode is GoalMode.FILE:
        if goals is None:
            raise CrowdForecastContractError("Goal mode 'file' needs a goals file")
        if window.window_id not in goals:
            raise CrowdForecastLookupError(f"No goal for window {window.window_id}")
        return np.asarray(goals[window.window_id], dtype=np.float64).reshape(2)
    if endpoint is None:
        raise CrowdForecastContractError("Goal mode 'endpoint_gaussian' needs a fitted endpoint Gaussian")
    rng = rng if rng is not None else np.random.default_rng(0)
    return window.observed[-1].position + endpoint.sample(rng)


def sample_goals(mode: Union[str, GoalMode], window: Window, count: int, rng: np.random.Generator,
                 goals: Optional[Mapping[str, Sequence[float]]] = None,
                 endpoint: Optional[EndpointGaussian] = None) -> np.ndarray:
    return np.array([goal_mode(mode, window, rng, goals, endpoint) for _ in range(count)])


def read_goals(path: PathLike) -> Dict[str, List[float]]:
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise CrowdForecastParseError(f"Invalid goals file: {exc.msg}", exc.lineno, str(path)) from exc
    return {str(key): [float(value[0]), float(value[1])] for key, value in payload.items()}


def write_goals(goals: Mapping[str, Sequence[float]], path: PathLike) -> None:
    write_text_atomic(path, json.dumps({key: [float(value[0]), float(value[1])] for key, value in goals.items()}))


def _check_grid_size(grid_size: int) -> None:
    if grid_size < 1 or grid_size % 2 == 0:
        raise CrowdForecastUsageError(f"grid_size must be a positive odd number, got {grid_size}")


def density_grid(mean: np.ndarray, std: np.ndarray, grid_size: int, half_width: np.ndarray
                 ) -> Tuple[np.ndarray, Tuple[float, float, float, float]]:
    """
    Product of per-axis Gaussian densities at the cell centers of a G x G grid
    centered on the mean; row index is y, column index is x. G must be odd so
    the mean sits at the center cell. A std below 1e-12 on either axis gives a
    one-hot grid at the mean cell.
    """
    _check_grid_size(grid_size)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    extent = (float(mean[0] - half_width[0]), float(mean[0] + half_width[0]),
              float(mean[1] - half_width[1]), float(mean[1] + half_width[1]))
    cell = 2.0 * np.asarray(half_width, dtype=np.float64) / grid_size
    if np.any(std < DEGENERATE_STD):
        grid = np.zeros((grid_size, grid_size))
        column = int(np.clip(np.floor((mean[0] - extent[0]) / cell[0]), 0, grid_size - 1))
        row = int(np.clip(np.floor((mean[1] - extent[2]) / cell[1]), 0, grid_size - 1))
        grid[row, column] = 1.0
        return grid, extent
    xs = extent[0] + cell[0] * (np.arange(grid_size) + 0.5)
    ys = extent[2] + cell[1] * (np.arange(grid_size) + 0.5)
    px = np.exp(-0.5 * ((xs - mean[0]) / std[0]) ** 2) / (std[0] * np.sqrt(2.0 * np.pi))
    py = np.exp(-0.5 * ((ys - mean[1]) / std[1]) ** 2) / (std[1] * np.sqrt(2.0 * np.pi))
    return np.outer(py, px), extent


def explain(model: SocialPhysicsModel, window: Window, goal: np.ndarray, grid_size: int = 33,
            extent: Optional[float] = None) -> List[List[FactorExplanation]]:
    """
    Per-step factor explanations along the mean rollout.

    Parameters:
        model: the trained model.
        window: the window to explain.
        goal: destination.
        grid_size: G, the grid is G x G.
        extent: half-width of the grid around each factor's mean force; by
            default 5 stds per axis.

    Returns:
        List[List[FactorExplanation]]: for every step, one explanation per enabled factor.
    """
    _check_grid_size(grid_size)
    result = rollout(model, window, goal, np.random.default_rng(0), mode=ForceMode.MEAN)
    explanations = []
    for plan in result.plans:
        step = []
        for kind, (mean, std) in summarize(plan.distributions()).items():
            if extent is None:
                half_width = np.where(std < DEGENERATE_STD, 1.0, EXTENT_STDS * std)
            else:
                half_width = np.array([float(extent), float(extent)])
            grid, bounds = density_grid(mean, std, grid_size, half_width)
            step.append(FactorExplanation(kind, mean, std, grid, bounds))
        explanations.append(step)
    return explanations


def decompose_uncertainty(model: SocialPhysicsModel, window: Window, goal: np.ndarray, samples: int,
                          rng: np.random.Generator) -> Tuple[PredictionSet, PredictionSet]:
    """
    Aleatoric-only and aleatoric + epistemic predictions seeded identically.
    """
    seed = int(rng.integers(0, 2 ** 63 - 1))
    aleatoric = predict_standard(model, window, goal, samples, np.random.default_rng(seed), epistemic=False)
    combined = predict_standard(model, window, goal, samples, np.random.default_rng(seed), epistemic=True)
    return aleatoric, combined


def _samples(record: Union[PredictionSet, Mapping]) -> Tuple[str, np.ndarray]:
    if isinstance(record, PredictionSet):
        return record.window_id, record.samples
    return str(record["window_id"]), np.asarray(record["samples"], dtype=np.float64)


def evaluate_predictions(records: Sequence[Union[PredictionSet, Mapping]], windows: Sequence[Window],
                         homography: Optional[np.ndarray] = None) -> Dict[str, float]:
    """
    Mean best-of-K ADE and FDE over the predicted windows; with a homography,
    predictions and truth are mapped to world coordinates first.

    Raises:
        CrowdForecastLookupError: if a record names an unknown window.
    """
    by_id = {window.window_id: window for window in windows}
    ades, fdes = [], []
    for record in records:
        window_id, samples = _samples(record)
        if window_id not in by_id:
            raise CrowdForecastLookupError(f"Unknown window {window_id}")
        truth = by_id[window_id].future
        if homography is not None:
            truth = pixel_to_world(homography, truth)
            samples = np.array([pixel_to_world(homography, sample) for sample in samples])
        best_ade, best_fde = best_of(samples, truth)
        ades.append(best_ade)
        fdes.append(best_fde)
    if not ades:
        raise CrowdForecastContractError("No predictions to evaluate")
    return {"ade": float(np.mean(ades)), "fde": float(np.mean(fdes)), "windows": len(ades)}


def prediction_collisions(records: Sequence[Union[PredictionSet, Mapping]], windows: Sequence[Window],
                          radius: float) -> CollisionReport:
    """
    Collision statistics of predicted futures (first sample of each record).

    Windows whose future starts at the same frame are forecast together and
    form one group; each group is one entry of the report, labelled with the
    times of its first and last future frames in seconds from the earliest
    window frame.
    """
    by_id = {window.window_id: window for window in windows}
    all_frames = [frame_id for window in windows for frame_id in window.frame_ids]
    origin = min(all_frames, default=0)
    frame_step = frame_step_of(all_frames)
    dt = windows[0].dt if windows else SECONDS_PER_FRAME

    def seconds(frame_id: int) -> float:
        return (frame_id - origin) / frame_step * dt

    groups: Dict[int, Dict[int, Dict[int, np.ndarray]]] = {}
    for record in records:
        window_id, samples = _samples(record)
        if window_id not in by_id:
            raise CrowdForecastLookupError(f"Unknown window {window_id}")
        window = by_id[window_id]
        future_frames = window.frame_ids[len(window.observed):]
        tracks = groups.setdefault(future_frames[0], {})
        tracks[window.agent_id] = dict(zip(future_frames, samples[0]))
    intervals = []
    for first_frame in sorted(groups):
        tracks = groups[first_frame]
        agents, collisions = count_collisions(tracks, radius)
        last_frame = max(frame for track in tracks.values() for frame in track)
        intervals.append(IntervalCollisions(seconds(first_frame), seconds(last_frame), agents, collisions))
    return CollisionReport(tuple(intervals))


def write_predictions(records: Sequence[PredictionSet], path: PathLike) -> None:
    """JSON lines, one record per window."""
    write_text_atomic(path, "".join(json.dumps(record.to_record()) + "\n" for record in records))


def read_predictions(path: PathLike) -> List[PredictionSet]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                records.append(PredictionSet(str(payload["window_id"]), str(payload["goal_mode"]),
                                             np.array(payload["samples"], dtype=np.float64)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CrowdForecastParseError(f"Invalid prediction record: {exc}", line_number, str(path)) from exc
    return records
