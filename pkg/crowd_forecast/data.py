"""
Trajectory ingestion, coordinate transforms, windowing and neighborhoods.
"""

import json
import logging
import math
import os
import tempfile
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import NEIGHBOR_RADIUS, OBSERVED_FRAMES, PREDICTED_FRAMES, SECONDS_PER_FRAME, WINDOW_FRAMES
from .exceptions import (
    CrowdForecastContractError,
    CrowdForecastLookupError,
    CrowdForecastParseError,
    CrowdForecastProjectiveError,
    CrowdForecastValidationError,
)
from .types import AgentState, InputSpace, NeighborSet, Scene, Window

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MIN_HOMOGRAPHY_DETERMINANT = 1e-12
MIN_FOV_SPEED = 1e-6


def write_text_atomic(path: PathLike, text: str) -> None:
    """Writes text to a temporary file in the target directory, then renames it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(handle, "w", encoding="utf-8") as stream:
            stream.write(text)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


def validate_homography(matrix: np.ndarray) -> np.ndarray:
    matrix = np.array(matrix, dtype=np.float64)
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        raise CrowdForecastValidationError(f"Homography must be a finite 3x3 matrix, got shape {matrix.shape}")
    if abs(np.linalg.det(matrix)) <= MIN_HOMOGRAPHY_DETERMINANT:
        raise CrowdForecastValidationError("Homography is singular (|det| <= 1e-12)")
    matrix.setflags(write=False)
    return matrix


def read_homography(path: PathLike) -> np.ndarray:
    """
    Reads a homography file: three lines of three whitespace-separated floats.

    Raises:
        CrowdForecastParseError: if a line does not hold three numbers.
        CrowdForecastValidationError: if the matrix is not invertible.
    """
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = [float(token) for token in line.split()]
            except ValueError as exc:
                raise CrowdForecastParseError(f"Not a number in {line!r}", line_number, str(path)) from exc
            if len(row) != 3:
                raise CrowdForecastParseError(f"Expected 3 values, got {len(row)}", line_number, str(path))
            rows.append(row)
    if len(rows) != 3:
        raise CrowdForecastParseError(f"Expected 3 rows, got {len(rows)}", None, str(path))
    return validate_homography(np.array(rows))


def load_obstacles(path: PathLike) -> np.ndarray:
    """Reads static obstacle points, one `x y` pair per line."""
    points = []
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.replace(",", " ").split()
            if len(tokens) != 2:
                raise CrowdForecastParseError(f"Expected 'x y', got {line!r}", line_number, str(path))
            try:
                points.append([float(tokens[0]), float(tokens[1])])
            except ValueError as exc:
                raise CrowdForecastParseError(f"Not a number in {line!r}", line_number, str(path)) from exc
    return np.array(points, dtype=np.float64).reshape(-1, 2)


def world_to_pixel(homography: np.ndarray, point: np.ndarray) -> np.ndarray:
    """
    Applies a homography to one point or an (n, 2) array of points.

    Raises:
        CrowdForecastProjectiveError: if a point maps to a zero third component.
    """
    return _project(np.asarray(homography, dtype=np.float64), point)


def pixel_to_world(homography: np.ndarray, point: np.ndarray) -> np.ndarray:
    return _project(np.linalg.inv(np.asarray(homography, dtype=np.float64)), point)


def _project(matrix: np.ndarray, point: np.ndarray) -> np.ndarray:
    points = np.asarray(point, dtype=np.float64)
    single = points.ndim == 1
    points = points.reshape(-1, 2)
    homogeneous = np.hstack([points, np.ones((len(points), 1))]) @ matrix.T
    scale = homogeneous[:, 2]
    if np.any(np.abs(scale) < MIN_HOMOGRAPHY_DETERMINANT):
        raise CrowdForecastProjectiveError("Point maps to infinity under the homography")
    projected = homogeneous[:, :2] / scale[:, None]
    return projected[0] if single else projected


def load_trajectories(path: PathLike,
                      homography_path: Optional[PathLike] = None,
                      dt: float = SECONDS_PER_FRAME,
                      obstacles_path: Optional[PathLike] = None,
                      input_space: Union[str, InputSpace] = InputSpace.PIXEL,
                      min_frames: int = WINDOW_FRAMES,
                      name: Optional[str] = None) -> Scene:
    """
    Loads a tab-separated trajectory file into a Scene.

    Each record is `frame_id<TAB>agent_id<TAB>x<TAB>y`; lines starting with `#`
    are ignored. Agents seen on fewer than `min_frames` frames become dynamic
    obstacles.

    Parameters:
        path: the trajectory file.
        homography_path: optional homography file; identity when omitted.
        dt: seconds between consecutive frames.
        obstacles_path: optional static obstacle file.
        input_space: "world" converts records to pixels with the homography.
        min_frames: shortest track kept as an agent.
        name: scene name; defaults to the file stem.

    Returns:
        Scene: the loaded scene.

    Raises:
        CrowdForecastParseError: on a malformed row (with its line number).
        CrowdForecastValidationError: on a singular homography or non-positive dt.
    """
    space = InputSpace.parse(input_space)
    if not dt > 0:
        raise CrowdForecastValidationError(f"dt must be positive, got {dt}")
    homography = read_homography(homography_path) if homography_path else validate_homography(np.eye(3))
    tracks: Dict[int, Dict[int, np.ndarray]] = {}
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            frame_id, agent_id, position = _parse_record(line, line_number, str(path))
            track = tracks.setdefault(agent_id, {})
            if frame_id in track:
                raise CrowdForecastParseError(
                    f"Duplicate record for agent {agent_id} at frame {frame_id}", line_number, str(path))
            track[frame_id] = position
    if space is InputSpace.WORLD:
        tracks = {agent_id: {frame_id: world_to_pixel(homography, position)
                             for frame_id, position in track.items()}
                  for agent_id, track in tracks.items()}
    obstacles = load_obstacles(obstacles_path) if obstacles_path else np.zeros((0, 2))
    scene = scene_from_tracks(tracks, dt=dt, obstacles=obstacles, homography=homography,
                              min_frames=min_frames, name=name or Path(path).stem)
    logger.info("Loaded scene", extra={"event": "scene_loaded", "scene": scene.name,
                                       "agents": len(scene.agent_ids()), "frames": len(scene.frame_ids)})
    return scene


def _parse_record(line: str, line_number: int, path: str) -> Tuple[int, int, np.ndarray]:
    tokens = line.split("\t")
    if len(tokens) != 4:
        raise CrowdForecastParseError(f"Expected 4 tab-separated fields, got {len(tokens)}", line_number, path)
    try:
        values = [float(token) for token in tokens]
    except ValueError as exc:
        raise CrowdForecastParseError(f"Not a number in {line!r}", line_number, path) from exc
    if not all(math.isfinite(value) for value in values):
        raise CrowdForecastParseError("Non-finite value", line_number, path)
    if not (values[0].is_integer() and values[1].is_integer()):
        raise CrowdForecastParseError("Frame and agent ids must be integers", line_number, path)
    return int(values[0]), int(values[1]), np.array(values[2:4])


def frame_step_of(frame_ids: Sequence[int]) -> int:
    differences = np.diff(np.unique(np.asarray(frame_ids, dtype=np.int64)))
    return int(differences.min()) if len(differences) else 1


def contiguous_spans(frames: Sequence[int], frame_step: int) -> List[List[int]]:
    """Splits sorted frame ids wherever consecutive ids differ by more than frame_step."""
    spans: List[List[int]] = []
    for frame_id in sorted(frames):
        if spans and frame_id - spans[-1][-1] == frame_step:
            spans[-1].append(frame_id)
        else:
            spans.append([frame_id])
    return spans


def span_velocities(positions: np.ndarray, dt: float) -> np.ndarray:
    """Backward differences within one span; the first frame copies the second frame's velocity."""
    velocities = np.zeros_like(positions)
    if len(positions) > 1:
        velocities[1:] = (positions[1:] - positions[:-1]) / dt
        velocities[0] = velocities[1]
    return velocities


def scene_from_tracks(tracks: Mapping[int, Mapping[int, np.ndarray]],
                      dt: float = SECONDS_PER_FRAME,
                      obstacles: Optional[np.ndarray] = None,
                      homography: Optional[np.ndarray] = None,
                      bounds: Optional[Sequence[float]] = None,
                      min_frames: int = WINDOW_FRAMES,
                      name: str = "scene",
                      metadata: Optional[Mapping] = None,
                      velocities: Optional[Mapping[int, Mapping[int, np.ndarray]]] = None,
                      frame_step: Optional[int] = None) -> Scene:
    """
    Builds an immutable Scene from per-agent position tracks.

    Velocities are derived per contiguous span unless given explicitly.
    """
    obstacles = np.array(obstacles if obstacles is not None else np.zeros((0, 2)), dtype=np.float64).reshape(-1, 2)
    homography = validate_homography(homography if homography is not None else np.eye(3))
    all_frames = sorted({frame_id for track in tracks.values() for frame_id in track})
    step = frame_step or frame_step_of(all_frames)
    frame_dt = dt
    states: Dict[int, Dict[int, AgentState]] = {frame_id: {} for frame_id in all_frames}
    dynamic: Dict[int, List[np.ndarray]] = {}
    for agent_id in sorted(tracks):
        track = tracks[agent_id]
        if len(track) < min_frames:
            for frame_id, position in track.items():
                dynamic.setdefault(frame_id, []).append(np.asarray(position, dtype=np.float64))
            continue
        for span in contiguous_spans(track.keys(), step):
            positions = np.array([track[frame_id] for frame_id in span], dtype=np.float64)
            if velocities is not None:
                span_v = np.array([velocities[agent_id][frame_id] for frame_id in span], dtype=np.float64)
            else:
                span_v = span_velocities(positions, frame_dt)
            for frame_id, position, velocity in zip(span, positions, span_v):
                states[frame_id][agent_id] = AgentState(position, velocity)
    dynamic_arrays = {}
    for frame_id, points in dynamic.items():
        array = np.array(points).reshape(-1, 2)
        array.setflags(write=False)
        dynamic_arrays[frame_id] = array
    obstacles.setflags(write=False)
    if bounds is None:
        bounds = _bounds_of(tracks, obstacles)
    scene = Scene(
        frame_ids=tuple(all_frames),
        states=MappingProxyType({frame_id: MappingProxyType(agents) for frame_id, agents in states.items()}),
        obstacles=obstacles,
        dynamic_obstacles=MappingProxyType(dynamic_arrays),
        homography=homography,
        bounds=tuple(float(value) for value in bounds),
        dt=float(dt),
        frame_step=step,
        name=name,
        metadata=MappingProxyType(dict(metadata or {})),
    )
    return scene


def _bounds_of(tracks: Mapping[int, Mapping[int, np.ndarray]], obstacles: np.ndarray) -> Tuple[float, ...]:
    points = [np.asarray(position) for track in tracks.values() for position in track.values()]
    points.extend(obstacles)
    if not points:
        return (0.0, 0.0, 0.0, 0.0)
    stacked = np.array(points).reshape(-1, 2)
    low, high = stacked.min(axis=0), stacked.max(axis=0)
    return (float(low[0]), float(low[1]), float(high[0]), float(high[1]))


def neighbors(scene: Scene, agent: int, frame: int,
              radius: float = NEIGHBOR_RADIUS, fov_deg: Optional[float] = None) -> NeighborSet:
    """
    Finds the agents near `agent` at `frame`.

    Other agents count when their distance is strictly below `radius`; with
    `fov_deg` they must also lie within +/- fov_deg/2 of the agent's heading,
    a test skipped when the agent is (nearly) at rest.

    Raises:
        CrowdForecastLookupError: if the agent is not present at the frame.
    """
    frame_states = scene.states.get(frame)
    if frame_states is None or agent not in frame_states:
        raise CrowdForecastLookupError(f"Agent {agent} is not present at frame {frame}")
    found = neighbors_in(frame_states, agent, radius, fov_deg)
    return NeighborSet(agent_id=agent, frame_id=frame, neighbor_ids=found)


def neighbors_in(frame_states: Mapping[int, AgentState], agent: int,
                 radius: float = NEIGHBOR_RADIUS, fov_deg: Optional[float] = None) -> Tuple[int, ...]:
    """Ids of the agents in `frame_states` that are neighbors of `agent`, in id order."""
    own = frame_states[agent]
    heading = None
    speed = float(np.linalg.norm(own.velocity))
    if fov_deg is not None and speed >= MIN_FOV_SPEED:
        heading = own.velocity / speed
        cos_half = math.cos(math.radians(fov_deg) / 2.0)
    found = []
    for other_id in sorted(frame_states):
        if other_id == agent:
            continue
        offset = frame_states[other_id].position - own.position
        distance = float(np.linalg.norm(offset))
        if not distance < radius:
            continue
        if heading is not None and distance > 0 and float(heading @ offset) / distance < cos_half:
            continue
        found.append(other_id)
    return tuple(found)


def window_scene(scene: Scene, stride: int = 1,
                 observed: int = OBSERVED_FRAMES, predicted: int = PREDICTED_FRAMES,
                 radius: float = NEIGHBOR_RADIUS, fov_deg: Optional[float] = None,
                 start_index: int = 0) -> List[Window]:
    """
    Cuts every contiguous span of every agent into observed/future windows.

    Parameters:
        scene: the scene to cut.
        stride: frames between consecutive window starts (>= 1).
        observed: observed frames per window.
        predicted: future frames per window.
        radius, fov_deg: neighborhood rule for the attached context.
        start_index: index given to the first window (windows are numbered in order).

    Returns:
        List[Window]: the windows, ordered by agent then start frame.
    """
    if stride < 1:
        raise CrowdForecastContractError(f"stride must be >= 1, got {stride}")
    length = observed + predicted
    windows: List[Window] = []
    empty = np.zeros((0, 2))
    for agent_id in scene.agent_ids():
        track = scene.track(agent_id)
        for span in contiguous_spans(track.keys(), scene.frame_step):
            for start in range(0, len(span) - length + 1, stride):
                frames = tuple(span[start:start + length])
                states = [track[frame_id] for frame_id in frames]
                neighbor_sets = [neighbors(scene, agent_id, frame_id, radius, fov_deg) for frame_id in frames]
                future = np.stack([state.position for state in states[observed:]])
                future.setflags(write=False)
                windows.append(Window(
                    window_id=f"{scene.name}/{agent_id}/{frames[0]}",
                    agent_id=agent_id,
                    frame_ids=frames,
                    observed=tuple(states[:observed]),
                    future=future,
                    destination=future[-1],
                    neighbor_ids=tuple(found.neighbor_ids for found in neighbor_sets),
                    neighbor_windows=tuple(
                        tuple(scene.states[found.frame_id][other] for other in found.neighbor_ids)
                        for found in neighbor_sets),
                    static_obstacles=scene.obstacles,
                    dynamic_obstacles=tuple(scene.dynamic_obstacles.get(frame_id, empty) for frame_id in frames),
                    dt=scene.dt,
                    index=start_index + len(windows),
                ))
    return windows


def window_velocities(window: Window) -> np.ndarray:
    """Velocities at the future frames, by backward differences from the last observed position."""
    path = np.vstack([window.observed[-1].position, window.future])
    return (path[1:] - path[:-1]) / window.dt


def split_leave_one_out(scenes: Sequence[Scene], held_out: str) -> Tuple[List[Scene], List[Scene]]:
    """Splits scenes into (train, test) with the scene named `held_out` as the test set."""
    test = [scene for scene in scenes if scene.name == held_out]
    if not test:
        raise CrowdForecastLookupError(f"No scene named {held_out!r}")
    return [scene for scene in scenes if scene.name != held_out], test


def subsample_windows(windows: Sequence[Window], fraction: float, rng: np.random.Generator) -> List[Window]:
    """Keeps a random `fraction` of the windows (at least one), preserving their order."""
    if not 0 < fraction <= 1:
        raise CrowdForecastContractError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(windows)
    count = max(1, int(round(fraction * len(windows))))
    chosen = np.sort(rng.choice(len(windows), size=count, replace=False))
    return [windows[index] for index in chosen]


def scene_to_dict(scene: Scene) -> Dict:
    agents: Dict[str, List[List[float]]] = {}
    for frame_id in scene.frame_ids:
        for agent_id, state in scene.states[frame_id].items():
            agents.setdefault(str(agent_id), []).append(
                [frame_id, *state.position.tolist(), *state.velocity.tolist()])
    return {
        "name": scene.name,
        "dt": scene.dt,
        "frame_step": scene.frame_step,
        "frame_ids": list(scene.frame_ids),
        "agents": agents,
        "obstacles": scene.obstacles.tolist(),
        "dynamic_obstacles": {str(frame_id): points.tolist()
                              for frame_id, points in sorted(scene.dynamic_obstacles.items())},
        "homography": scene.homography.tolist(),
        "bounds": list(scene.bounds),
        "metadata": dict(scene.metadata),
    }


def scene_from_dict(payload: Mapping) -> Scene:
    try:
        dt = float(payload["dt"])
        if not dt > 0:
            raise CrowdForecastValidationError(f"dt must be positive, got {dt}")
        homography = validate_homography(np.array(payload["homography"], dtype=np.float64))
        tracks: Dict[int, Dict[int, np.ndarray]] = {}
        velocities: Dict[int, Dict[int, np.ndarray]] = {}
        for agent_key, rows in payload["agents"].items():
            agent_id = int(agent_key)
            for frame_id, x, y, vx, vy in rows:
                tracks.setdefault(agent_id, {})[int(frame_id)] = np.array([x, y], dtype=np.float64)
                velocities.setdefault(agent_id, {})[int(frame_id)] = np.array([vx, vy], dtype=np.float64)
        frame_ids = [int(frame_id) for frame_id in payload.get("frame_ids", [])]
        if any(later <= earlier for earlier, later in zip(frame_ids, frame_ids[1:])):
            raise CrowdForecastValidationError("Frame ids must be strictly increasing")
        dynamic = {int(frame_id): np.array(points, dtype=np.float64).reshape(-1, 2)
                   for frame_id, points in payload.get("dynamic_obstacles", {}).items()}
        obstacles = np.array(payload.get("obstacles", []), dtype=np.float64).reshape(-1, 2)
    except (KeyError, TypeError, ValueError) as exc:
        raise CrowdForecastParseError(f"Malformed scene document: {exc}") from exc
    scene = scene_from_tracks(tracks, dt=dt, obstacles=obstacles, homography=homography,
                              bounds=payload.get("bounds"), min_frames=0,
                              name=payload.get("name", "scene"), metadata=payload.get("metadata"),
                              velocities=velocities, frame_step=int(payload.get("frame_step", 0)) or None)
    all_frames = sorted(set(scene.frame_ids) | set(dynamic) | set(frame_ids))
    for frame_id, points in dynamic.items():
        points.setflags(write=False)
    return Scene(
        frame_ids=tuple(all_frames),
        states=MappingProxyType({frame_id: scene.states.get(frame_id, MappingProxyType({}))
                                 for frame_id in all_frames}),
        obstacles=scene.obstacles,
        dynamic_obstacles=MappingProxyType(dynamic),
        homography=scene.homography,
        bounds=scene.bounds,
        dt=scene.dt,
        frame_step=scene.frame_step,
        name=scene.name,
        metadata=scene.metadata,
    )


def save_scene(scene: Scene, path: PathLike) -> None:
    write_text_atomic(path, json.dumps(scene_to_dict(scene)))


def read_scene(path: PathLike) -> Scene:
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise CrowdForecastParseError(f"Invalid JSON: {exc.msg}", exc.lineno, str(path)) from exc
    return scene_from_dict(payload)


def load_scene_any(path: PathLike, **kwargs) -> Scene:
    """Reads a scene export (`.json`) or a raw trajectory file."""
    if str(path).endswith(".json"):
        return read_scene(path)
    return load_trajectories(path, **kwargs)


def write_trajectories(scene: Scene, path: PathLike) -> None:
    """Writes the scene's agents in the tab-separated trajectory format."""
    lines = []
    for frame_id in scene.frame_ids:
        for agent_id in sorted(scene.states[frame_id]):
            x, y = scene.states[frame_id][agent_id].position
            lines.append(f"{frame_id}\t{agent_id}\t{x!r}\t{y!r}")
    write_text_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


def iter_windows(scenes: Iterable[Scene], stride: int = 1, radius: float = NEIGHBOR_RADIUS,
                 fov_deg: Optional[float] = None) -> List[Window]:
    """Windows of several scenes with one running index."""
    windows: List[Window] = []
    for scene in scenes:
        windows.extend(window_scene(scene, stride=stride, radius=radius, fov_deg=fov_deg,
                                    start_index=len(windows)))
    return windows
