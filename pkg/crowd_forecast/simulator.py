"""
Crowd simulation with a trained (or fixed-coefficient) model, synthetic scene
generation with known coefficients, and collision statistics.
"""

import copy
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .config import SimConfig
from .constants import NEIGHBOR_RADIUS, SECONDS_PER_FRAME, WINDOW_FRAMES
from .data import neighbors_in, scene_from_tracks
from .exceptions import CrowdForecastContractError
from .rollout import ModelSettings, SocialPhysicsModel, StepDraw, StepPlan
from .types import AgentState, CoefficientOverride, CollisionReport, FactorKind, IntervalCollisions, Scene

logger = logging.getLogger(__name__)

Tracks = Mapping[int, Mapping[int, np.ndarray]]

TIME_TOLERANCE = 1e-9
GOAL_TOLERANCE = 1e-9
MAX_GOAL_ITERATIONS = 50

_OPPOSITE_EDGE = {0: 1, 1: 0, 2: 3, 3: 2}


@dataclass
class _Agent:
    state: AgentState
    goal: np.ndarray
    rng: np.random.Generator
    recurrent: Mapping
    path: List[np.ndarray]
    spawn_frame: int = 0
    planned_steps: int = 1


def _advance(model: SocialPhysicsModel, agents: Dict[int, _Agent], obstacles: np.ndarray,
             horizons: Mapping[int, int], epistemic: bool, threads: int = 1) -> Dict[int, StepDraw]:
    """
    One synchronous frame: every agent's forces come from the frame-t states,
    then all agents move.
    """
    settings = model.settings
    frame_states = {agent_id: agent.state for agent_id, agent in agents.items()}

    def plan_and_draw(agent_id: int) -> Tuple[StepPlan, StepDraw]:
        agent = agents[agent_id]
        ids = neighbors_in(frame_states, agent_id, settings.neighbor_radius, settings.fov_deg)
        rows = np.array([frame_states[other].as_vector() for other in ids]).reshape(-1, 4)
        plan = model.evaluate(agent.state, agent.goal, horizons[agent_id], rows, obstacles, agent.recurrent, agent.rng)
        return plan, model.draw(plan, agent.rng, history=np.array(agent.path), epistemic=epistemic)

    order = sorted(agents)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(plan_and_draw, order))
    else:
        results = [plan_and_draw(agent_id) for agent_id in order]

    draws = {}
    for agent_id, (plan, drawn) in zip(order, results):
        agent = agents[agent_id]
        agent.state = drawn.output.state
        agent.recurrent = plan.recurrent
        agent.path.append(agent.state.position)
        draws[agent_id] = drawn
    return draws


def _edge_point(bounds: Sequence[float], edge: int, rng: np.random.Generator) -> np.ndarray:
    x_min, y_min, x_max, y_max = bounds
    if edge in (0, 1):
        return np.array([x_min if edge == 0 else x_max, rng.uniform(y_min, y_max)])
    return np.array([rng.uniform(x_min, x_max), y_min if edge == 2 else y_max])


def _spawn_batch(model: SocialPhysicsModel, sim_config: SimConfig, bounds: Sequence[float],
                 agents: Dict[int, _Agent], next_id: int, frame: int, rng: np.random.Generator) -> Tuple[int, int]:
    """Places up to one batch of agents on the boundary; returns the next id and the number skipped."""
    dt = model.settings.dt
    radius = sim_config.collision_radius
    count = min(sim_config.batch, sim_config.hnp - len(agents))
    skipped = 0
    for _ in range(count):
        occupied = [agent.state.position for agent in agents.values()]
        for _attempt in range(sim_config.spawn_attempts):
            edge = int(rng.integers(4))
            start = _edge_point(bounds, edge, rng)
            if all(np.linalg.norm(start - other) >= 2.0 * radius for other in occupied):
                break
        else:
            skipped += 1
            logger.warning("Spawn skipped", extra={"event": "spawn_skipped", "frame": frame,
                                                   "attempts": sim_config.spawn_attempts})
            continue
        goal_edge = _OPPOSITE_EDGE[edge] if sim_config.goal_rule == "opposite" else edge
        goal = _edge_point(bounds, goal_edge, rng)
        offset = goal - start
        distance = float(np.linalg.norm(offset))
        speed = sim_config.desired_speed
        velocity = offset / distance * speed if distance > 0 else np.zeros(2)
        agents[next_id] = _Agent(
            state=AgentState(start, velocity),
            goal=goal,
            rng=rng.spawn(1)[0],
            recurrent=model.initial_recurrent(),
            path=[start],
            spawn_frame=frame,
            planned_steps=max(1, math.ceil(distance / (speed * dt))),
        )
        next_id += 1
    return next_id, skipped


def simulate(model: SocialPhysicsModel, sim_config: SimConfig, rng: np.random.Generator,
             scene: Optional[Scene] = None, threads: int = 1) -> Scene:
    """
    Runs a crowd simulation.

    Agents enter in batches on the scene boundary, walk towards a point on the
    opposite edge (or the same edge) and leave once within the collision radius
    of their goal. Each frame applies the model's full stochastic step; the
    residual is sampled when the model completed phase 2.

    Parameters:
        model: a trained model or one with fixed coefficients.
        sim_config: density, timing and geometry settings.
        rng: spawn placement draws from it; each agent gets its own child stream.
        scene: optional scene providing bounds, obstacles and homography.
        threads: worker threads for the per-agent force computation.

    Returns:
        Scene: the simulated trajectories (every agent kept regardless of length).
    """
    bounds = sim_config.bounds
    if bounds is None:
        if scene is None:
            raise CrowdForecastContractError("Simulation needs bounds from the config or a scene")
        bounds = scene.bounds
    bounds = tuple(float(value) for value in bounds)
    obstacles = scene.obstacles if scene is not None else np.zeros((0, 2))
    dt = model.settings.dt
    frames = int(round(sim_config.duration / dt))
    spawn_every = max(1, int(round(sim_config.spawn_interval / dt)))
    epistemic = model.epistemic_active

    agents: Dict[int, _Agent] = {}
    tracks: Dict[int, Dict[int, np.ndarray]] = {}
    velocities: Dict[int, Dict[int, np.ndarray]] = {}
    goals: Dict[str, List[float]] = {}
    next_id, skipped, peak = 0, 0, 0
    for frame in range(frames + 1):
        if frame % spawn_every == 0:
            first_new = next_id
            next_id, batch_skipped = _spawn_batch(model, sim_config, bounds, agents, next_id, frame, rng)
            skipped += batch_skipped
            for agent_id in range(first_new, next_id):
                goals[str(agent_id)] = agents[agent_id].goal.tolist()
        peak = max(peak, len(agents))
        for agent_id, agent in agents.items():
            tracks.setdefault(agent_id, {})[frame] = agent.state.position
            velocities.setdefault(agent_id, {})[frame] = agent.state.velocity
        arrived = [agent_id for agent_id, agent in agents.items()
                   if np.linalg.norm(agent.state.position - agent.goal) <= sim_config.collision_radius]
        for agent_id in arrived:
            del agents[agent_id]
        if frame == frames or not agents:
            continue
        horizons = {agent_id: max(1, agent.planned_steps - (frame - agent.spawn_frame))
                    for agent_id, agent in agents.items()}
        _advance(model, agents, obstacles, horizons, epistemic, threads)

    logger.info("Simulation finished", extra={"event": "simulation_finished", "agents": next_id,
                                              "peak": peak, "skipped_spawns": skipped, "frames": frames + 1})
    name = f"{scene.name}-simulation" if scene is not None else "simulation"
    return scene_from_tracks(
        tracks, dt=dt, obstacles=obstacles,
        homography=scene.homography if scene is not None else None,
        bounds=bounds, min_frames=1, name=name,
        metadata={"hnp": sim_config.hnp, "goals": goals, "skipped_spawns": skipped, "peak": peak},
        velocities=velocities, frame_step=1)


def _positions(trajectories: Union[Scene, Tracks]) -> Dict[int, Dict[int, np.ndarray]]:
    if isinstance(trajectories, Scene):
        return {agent_id: {frame_id: state.position for frame_id, state in trajectories.track(agent_id).items()}
                for agent_id in trajectories.agent_ids()}
    return {agent_id: {frame_id: np.asarray(position, dtype=np.float64) for frame_id, position in track.items()}
            for agent_id, track in trajectories.items()}


def count_collisions(tracks: Tracks, radius: float, frames: Optional[set] = None) -> Tuple[int, int]:
    """
    Agents present and colliding pairs among `tracks`.

    A pair collides when its minimum distance over the frames where both are
    present (restricted to `frames`) is below 2 * radius; it counts once.

    Returns:
        Tuple[int, int]: N, the agents present in `frames`, and M, the colliding pairs.
    """
    if not radius > 0:
        raise CrowdForecastContractError(f"Collision radius must be positive, got {radius}")
    present = {}
    for agent_id in sorted(tracks):
        kept = {frame_id: position for frame_id, position in tracks[agent_id].items()
                if frames is None or frame_id in frames}
        if kept:
            present[agent_id] = kept
    collisions = 0
    for first, second in itertools.combinations(sorted(present), 2):
        shared = sorted(present[first].keys() & present[second].keys())
        if not shared:
            continue
        offsets = np.array([np.asarray(present[first][frame_id]) - np.asarray(present[second][frame_id])
                            for frame_id in shared])
        if np.min(np.linalg.norm(offsets, axis=1)) < 2.0 * radius:
            collisions += 1
    return len(present), collisions


def collision_stats(trajectories: Union[Scene, Tracks], radius: float, intervals: Sequence[Tuple[float, float]],
                    dt: float = SECONDS_PER_FRAME) -> CollisionReport:
    """
    Collision statistics over time intervals.

    Interval bounds are inclusive seconds measured from the first frame; frame
    time is (frame_id - first frame) / frame_step * dt. A Scene supplies its
    own dt and frame step.

    Parameters:
        trajectories: a Scene, or agent id -> frame id -> position.
        radius: collision radius r; a collision is a distance below 2r.
        intervals: (t_start, t_end) pairs in seconds.
        dt: seconds per frame step for plain trajectories.

    Returns:
        CollisionReport: N, M and rate per interval.
    """
    frame_step = 1
    if isinstance(trajectories, Scene):
        dt, frame_step = trajectories.dt, trajectories.frame_step
    tracks = _positions(trajectories)
    all_frames = sorted({frame_id for track in tracks.values() for frame_id in track})
    origin = all_frames[0] if all_frames else 0
    results = []
    for start, end in intervals:
        if start > end:
            raise CrowdForecastContractError(f"Interval ({start}, {end}) ends before it starts")
        frames = {frame_id for frame_id in all_frames
                  if start - TIME_TOLERANCE <= (frame_id - origin) / frame_step * dt <= end + TIME_TOLERANCE}
        agents, collisions = count_collisions(tracks, radius, frames)
        results.append(IntervalCollisions(float(start), float(end), agents, collisions))
    return CollisionReport(tuple(results))


@dataclass(frozen=True)
class DensityPoint:
    hnp: int
    mean_rate: float
    mean_collisions: float
    reports: Tuple[CollisionReport, ...] = ()

    def to_record(self) -> Dict:
        return {"hnp": self.hnp, "mean_rate": self.mean_rate, "mean_collisions": self.mean_collisions,
                "reports": [report.to_record() for report in self.reports]}


def density_sweep(model: SocialPhysicsModel, sim_config: SimConfig, hnp_values: Sequence[int],
                  seeds: Sequence[int], scene: Optional[Scene] = None) -> List[DensityPoint]:
    """Collision rate and count against the number of agents, averaged over seeds."""
    points = []
    for hnp in hnp_values:
        config = SimConfig(sim_config.config, hnp=int(hnp))
        reports = []
        for seed in seeds:
            simulated = simulate(model, config, np.random.default_rng(seed), scene)
            reports.append(collision_stats(simulated, config.collision_radius, config.interval_pairs()))
        points.append(DensityPoint(
            hnp=int(hnp),
            mean_rate=float(np.mean([report.mean_rate for report in reports])),
            mean_collisions=float(np.mean([report.mean_collisions for report in reports])),
            reports=tuple(reports)))
        logger.info("Density point", extra={"event": "density_point", "hnp": int(hnp),
                                            "mean_rate": points[-1].mean_rate})
    return points


@dataclass(frozen=True, eq=False)
class SyntheticTemplate:
    """Geometry and timing of a generated scene."""
    bounds: Tuple[float, float, float, float] = (0.0, 0.0, 400.0, 400.0)
    frames: int = WINDOW_FRAMES
    dt: float = SECONDS_PER_FRAME
    speed: Tuple[float, float] = (20.0, 60.0)
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    r_col: float = 50.0
    neighbor_radius: float = NEIGHBOR_RADIUS
    name: str = "synthetic"


def _overrides(true_params: Mapping) -> Dict[FactorKind, CoefficientOverride]:
    overrides = {}
    for kind, value in true_params.items():
        kind = FactorKind.parse(kind.value if isinstance(kind, FactorKind) else kind)
        if isinstance(value, CoefficientOverride):
            overrides[kind] = value
        elif isinstance(value, (tuple, list)):
            overrides[kind] = CoefficientOverride(float(value[0]), float(value[1]))
        else:
            overrides[kind] = CoefficientOverride(float(value))
    return overrides


def synthetic_model(template: SyntheticTemplate, true_params: Mapping) -> SocialPhysicsModel:
    """A parameter-free model whose coefficients are the given constants or Gaussians."""
    overrides = _overrides(true_params)
    settings = ModelSettings(
        dt=template.dt, r_col=template.r_col, neighbor_radius=template.neighbor_radius,
        use_goal=FactorKind.GOAL in overrides,
        use_collision=FactorKind.COLLISION in overrides,
        use_environment=FactorKind.ENVIRONMENT in overrides,
        aleatoric=True, epistemic=False, overrides=MappingProxyType(overrides))
    return SocialPhysicsModel(None, settings)


def _start_states(template: SyntheticTemplate, n_agents: int, rng: np.random.Generator, crossing: bool
                  ) -> List[AgentState]:
    x_min, y_min, x_max, y_max = template.bounds
    duration = (template.frames - 1) * template.dt
    states = []
    while len(states) < n_agents:
        speed = rng.uniform(*template.speed)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        heading = np.array([np.cos(angle), np.sin(angle)])
        if crossing and n_agents - len(states) >= 2:
            meet = np.array([rng.uniform(x_min, x_max), rng.uniform(y_min, y_max)])
            other = np.array([-heading[1], heading[0]])
            for direction in (heading, other):
                velocity = direction * speed
                states.append(AgentState(meet - velocity * duration / 2.0, velocity))
        else:
            start = np.array([rng.uniform(x_min, x_max), rng.uniform(y_min, y_max)])
            states.append(AgentState(start, heading * speed))
    return states


def _synthesize(model: SocialPhysicsModel, template: SyntheticTemplate, starts: Sequence[AgentState],
                goals: np.ndarray, streams: Sequence[np.random.Generator]
                ) -> Tuple[Dict[int, Dict[int, np.ndarray]], Dict[int, Dict[int, np.ndarray]], np.ndarray]:
    """
    Simulates every agent over the template's frames towards fixed goals.

    Returns positions, velocities and, per agent, the derivative of its final
    position w.r.t. its goal through the goal factor alone.
    """
    dt = template.dt
    last = template.frames - 1
    agents = {agent_id: _Agent(state=start, goal=goals[agent_id], rng=copy.deepcopy(streams[agent_id]),
                               recurrent=model.initial_recurrent(), path=[start.position])
              for agent_id, start in enumerate(starts)}
    tracks = {agent_id: {0: start.position} for agent_id, start in enumerate(starts)}
    velocities = {agent_id: {0: start.velocity} for agent_id, start in enumerate(starts)}
    d_position = np.zeros(len(starts))
    d_velocity = np.zeros(len(starts))
    for frame in range(last):
        steps_remaining = last - frame
        draws = _advance(model, agents, template.obstacles, dict.fromkeys(agents, steps_remaining), False)
        for agent_id, drawn in draws.items():
            tracks[agent_id][frame + 1] = drawn.output.position
            velocities[agent_id][frame + 1] = drawn.output.velocity
            k_goal = drawn.output.coefficients.get(FactorKind.GOAL)
            if k_goal is not None and len(k_goal):
                d_base = (1.0 - d_position[agent_id]) / (steps_remaining * dt) - d_velocity[agent_id]
                d_velocity[agent_id] += float(k_goal[0]) * d_base * dt
            d_position[agent_id] += d_velocity[agent_id] * dt
    return tracks, velocities, d_position


def generate_synthetic(template: SyntheticTemplate, true_params: Mapping, n_agents: int,
                       rng: np.random.Generator, crossing: bool = False) -> Scene:
    """
    Generates a scene whose agents follow the model dynamics with known coefficients.

    All agents share the template's frames and interact with each other. Goals
    are solved to a fixed point so that each agent's recorded final position
    is the goal its goal force used; the coefficients and goals are stored in
    the scene metadata.

    Parameters:
        template: bounds, frame count, speeds and obstacles.
        true_params: factor -> constant, (mean, std) or CoefficientOverride;
            factors left out are disabled.
        n_agents: number of agents.
        rng: draws start states; agent i's noise uses child stream i.
        crossing: place agents in perpendicular pairs meeting mid-way.

    Returns:
        Scene: the generated trajectories.
    """
    if n_agents < 1:
        raise CrowdForecastContractError(f"n_agents must be >= 1, got {n_agents}")
    if template.frames < 2:
        raise CrowdForecastContractError(f"A synthetic scene needs at least 2 frames, got {template.frames}")
    model = synthetic_model(template, true_params)
    starts = _start_states(template, n_agents, rng, crossing)
    streams = rng.spawn(n_agents)
    duration = (template.frames - 1) * template.dt
    goals = np.array([start.position + start.velocity * duration for start in starts])

    used = goals
    for _iteration in range(MAX_GOAL_ITERATIONS):
        used = goals
        tracks, velocities, sensitivity = _synthesize(model, template, starts, used, streams)
        finals = np.array([tracks[agent_id][template.frames - 1] for agent_id in range(n_agents)])
        gaps = finals - goals
        if not model.settings.use_goal or np.max(np.abs(gaps)) < GOAL_TOLERANCE:
            break
        slopes = sensitivity - 1.0
        movable = np.abs(slopes) >= GOAL_TOLERANCE
        if not np.any(movable):
            break
        goals = goals.copy()
        goals[movable] = goals[movable] - gaps[movable] / slopes[movable, None]
    else:
        logger.warning("Synthetic goals did not reach a fixed point",
                       extra={"event": "goal_fixed_point", "max_gap": float(np.max(np.abs(gaps)))})

    overrides = model.settings.overrides
    metadata = {
        "true_params": {kind.value: {"mean": value.mean, "std": value.std} for kind, value in overrides.items()},
        "goals": {str(agent_id): used[agent_id].tolist() for agent_id in range(n_agents)},
        "crossing": crossing,
    }
    return scene_from_tracks(tracks, dt=template.dt, obstacles=template.obstacles, bounds=template.bounds,
                             min_frames=template.frames, name=template.name, metadata=metadata,
                             velocities=velocities, frame_step=1)
