"""
The social-physics model: evaluating the three factors for one agent and step,
drawing coefficients and residuals, multi-step rollouts over a window and the
reverse pass through a recorded rollout.
"""

import logging
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .constants import FEATURE_SCALE, LOG_SCALE_CLAMP, NEIGHBOR_RADIUS, SECONDS_PER_FRAME, SIGMA_LATENT
from .data import window_velocities
from .dynamics import (
    Diagnostics,
    collision_force_bases,
    env_force_bases,
    goal_force_base,
    sample_coefficients,
    sde_step,
)
from .exceptions import CrowdForecastContractError, CrowdForecastUsageError
from .networks import (
    CoefficientCache,
    ModelParams,
    coefficient_backward,
    coefficient_forward,
    condition_vector,
    cvae_sample,
    encode_state,
    encode_state_backward,
    neighbor_features,
    state_features,
)
from .nn import ParamDict, accumulate
from .types import (
    AgentState,
    CoefficientOverride,
    FactorKind,
    ForceDistribution,
    ForceMode,
    StepOutput,
    Window,
)

logger = logging.getLogger(__name__)

Recurrent = Mapping[FactorKind, Tuple[np.ndarray, np.ndarray]]

_PREFIX = {FactorKind.GOAL: "gn", FactorKind.COLLISION: "cn"}


@dataclass(frozen=True)
class ModelSettings:
    """Non-learned switches and constants of the model."""
    dt: float = SECONDS_PER_FRAME
    feature_scale: float = FEATURE_SCALE
    r_col: float = 50.0
    neighbor_radius: float = NEIGHBOR_RADIUS
    fov_deg: Optional[float] = None
    sigma_latent: float = SIGMA_LATENT
    use_goal: bool = True
    use_collision: bool = True
    use_environment: bool = True
    aleatoric: bool = True
    epistemic: bool = True
    overrides: Mapping[FactorKind, CoefficientOverride] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config, overrides: Optional[Mapping[FactorKind, CoefficientOverride]] = None
                    ) -> "ModelSettings":
        values = config.config
        return cls(
            dt=float(values["dt"]),
            feature_scale=float(values["feature_scale"]),
            r_col=float(values["r_col"]),
            neighbor_radius=float(values["neighbor_radius"]),
            fov_deg=values["fov_deg"],
            sigma_latent=float(values["sigma_latent"]),
            use_goal=values["use_goal"],
            use_collision=values["use_collision"],
            use_environment=values["use_environment"],
            aleatoric=values["aleatoric"],
            epistemic=values["epistemic"],
            overrides=MappingProxyType(dict(overrides or {})),
        )

    def enabled(self, kind: FactorKind) -> bool:
        return {FactorKind.GOAL: self.use_goal,
                FactorKind.COLLISION: self.use_collision,
                FactorKind.ENVIRONMENT: self.use_environment}[kind]

    def learned(self, kind: FactorKind) -> bool:
        return self.enabled(kind) and kind not in self.overrides

    @property
    def default_mode(self) -> ForceMode:
        return ForceMode.STOCHASTIC if self.aleatoric else ForceMode.MEAN


@dataclass(frozen=True, eq=False)
class FactorTerms:
    """All terms of one factor at one step: base rows with Jacobians and coefficient Gaussians."""
    kind: FactorKind
    bases: np.ndarray
    jacobians: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    learned: bool
    raw_log_std: Optional[np.ndarray] = None
    cache: Optional[CoefficientCache] = None

    def distributions(self) -> List[ForceDistribution]:
        return [ForceDistribution(self.kind, base, float(mean), float(std))
                for base, mean, std in zip(self.bases, self.mean, self.std)]


@dataclass(frozen=True, eq=False)
class StepPlan:
    """Network outputs and force bases for one agent at one step, before any sampling."""
    state: AgentState
    steps_remaining: int
    terms: Tuple[FactorTerms, ...]
    recurrent: Recurrent

    def distributions(self) -> List[ForceDistribution]:
        return [distribution for terms in self.terms for distribution in terms.distributions()]

    def term(self, kind: FactorKind) -> Optional[FactorTerms]:
        for terms in self.terms:
            if terms.kind is kind:
                return terms
        return None


@dataclass(frozen=True, eq=False)
class StepDraw:
    output: StepOutput
    noise: Mapping[FactorKind, np.ndarray]
    aleatoric_position: np.ndarray


@dataclass(frozen=True, eq=False)
class SocialPhysicsModel:
    """
    Learned parameters plus settings. `phases` records which training phases
    have completed; the residual CVAE is only sampled after phase 2.
    """
    params: Optional[ModelParams]
    settings: ModelSettings = ModelSettings()
    phases: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.params is None and any(self.settings.learned(kind) for kind in FactorKind):
            raise CrowdForecastContractError("A model without parameters needs an override for every enabled factor")

    def with_params(self, params: ModelParams) -> "SocialPhysicsModel":
        return replace(self, params=params)

    @property
    def epistemic_active(self) -> bool:
        return self.settings.epistemic and self.params is not None and "2" in self.phases

    def initial_recurrent(self) -> Dict[FactorKind, Tuple[np.ndarray, np.ndarray]]:
        recurrent = {}
        if self.params is not None:
            if self.settings.learned(FactorKind.GOAL):
                recurrent[FactorKind.GOAL] = self.params.goal.lstm.zero_state()
            if self.settings.learned(FactorKind.COLLISION):
                recurrent[FactorKind.COLLISION] = self.params.collision.lstm.zero_state()
        return recurrent

    def _net(self, kind: FactorKind):
        return self.params.goal if kind is FactorKind.GOAL else self.params.collision

    def observe(self, state: AgentState, recurrent: Recurrent, record: bool = False
                ) -> Tuple[Dict[FactorKind, Tuple[np.ndarray, np.ndarray]], Dict]:
        """Feeds an observed state to the recurrent encoders."""
        features = state_features(state, self.settings.feature_scale)
        advanced, caches = dict(recurrent), {}
        for kind in recurrent:
            advanced[kind], cache = encode_state(self._net(kind), features, recurrent[kind])
            if record:
                caches[kind] = cache
        return advanced, caches

    def evaluate(self, state: AgentState, goal: Optional[np.ndarray], steps_remaining: int,
                 neighbors: np.ndarray, obstacles: np.ndarray, recurrent: Recurrent,
                 rng: Optional[np.random.Generator] = None, diagnostics: Optional[Diagnostics] = None,
                 record: bool = False) -> StepPlan:
        """
        Computes every enabled factor's bases and coefficient Gaussians.

        Parameters:
            state: the agent's current state.
            goal: destination used by the goal factor.
            steps_remaining: frames left until the destination should be reached.
            neighbors: neighbor rows (n, 4) of [x, y, vx, vy].
            obstacles: obstacle points (m, 2).
            recurrent: LSTM states from the previous step.
            rng: generator for singularity clamps.
            diagnostics: collects clamp events.
            record: keep caches for a backward pass.

        Returns:
            StepPlan: the factor terms and the advanced recurrent state.
        """
        settings = self.settings
        features = state_features(state, settings.feature_scale)
        advanced = dict(recurrent)
        terms: List[FactorTerms] = []
        neighbors = np.asarray(neighbors, dtype=np.float64).reshape(-1, 4)
        obstacles = np.asarray(obstacles, dtype=np.float64).reshape(-1, 2)

        if settings.use_goal:
            if goal is None:
                raise CrowdForecastContractError("The goal factor needs a destination")
            base = goal_force_base(state.position, state.velocity, goal, steps_remaining, settings.dt)
            jacobian = (-np.eye(2) / (steps_remaining * settings.dt))[None]
            terms.append(self._terms(FactorKind.GOAL, base[None], jacobian, features,
                                     settings.feature_scale * np.asarray(goal, dtype=np.float64),
                                     advanced, record))

        if settings.use_collision:
            bases, jacobians = collision_force_bases(state.position - neighbors[:, :2], settings.r_col,
                                                     rng, diagnostics)
            terms.append(self._terms(FactorKind.COLLISION, bases, jacobians, features,
                                     neighbor_features(state, neighbors, settings.feature_scale),
                                     advanced, record))

        if settings.use_environment:
            bases, jacobians = env_force_bases(state.position - obstacles, rng, diagnostics)
            count = len(bases)
            override = settings.overrides.get(FactorKind.ENVIRONMENT)
            if override is not None:
                terms.append(FactorTerms(FactorKind.ENVIRONMENT, bases, jacobians, np.full(count, override.mean),
                                         np.full(count, override.std), learned=False))
            else:
                environment = self.params.environment
                log_sigma = float(np.clip(environment.log_sigma[0], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
                terms.append(FactorTerms(FactorKind.ENVIRONMENT, bases, jacobians,
                                         np.full(count, environment.mu[0]), np.full(count, np.exp(log_sigma)),
                                         learned=True, raw_log_std=np.full(count, environment.log_sigma[0])))

        return StepPlan(state, steps_remaining, tuple(terms), MappingProxyType(advanced))

    def _terms(self, kind: FactorKind, bases: np.ndarray, jacobians: np.ndarray, features: np.ndarray,
               context: np.ndarray, advanced: Dict, record: bool) -> FactorTerms:
        override = self.settings.overrides.get(kind)
        count = len(bases)
        if override is not None:
            return FactorTerms(kind, bases, jacobians, np.full(count, override.mean), np.full(count, override.std),
                               learned=False)
        mu, log_sigma, advanced[kind], cache = coefficient_forward(self._net(kind), features, context, advanced[kind])
        mu = np.atleast_1d(mu)
        return FactorTerms(kind, bases, jacobians, mu, np.exp(np.atleast_1d(log_sigma)), learned=True,
                           raw_log_std=np.atleast_1d(cache.raw_log_sigma), cache=cache if record else None)

    def draw(self, plan: StepPlan, rng: np.random.Generator, mode: Optional[ForceMode] = None,
             history: Optional[np.ndarray] = None, epistemic: bool = False) -> StepDraw:
        """
        Samples every coefficient (goal, then each neighbor, then each obstacle)
        and, with `epistemic`, a residual from the CVAE; then takes one step.
        """
        mode = mode or self.settings.default_mode
        force = np.zeros(2)
        coefficients: Dict[FactorKind, np.ndarray] = {}
        noise: Dict[FactorKind, np.ndarray] = {}
        for terms in plan.terms:
            k, xi = sample_coefficients(terms.mean, terms.std, rng, mode) if len(terms.mean) else (np.zeros(0), np.zeros(0))
            coefficients[terms.kind], noise[terms.kind] = k, xi
            if len(k):
                force = force + k @ terms.bases
        state = plan.state
        aleatoric_position = state.position + (state.velocity + force * self.settings.dt) * self.settings.dt
        epsilon = np.zeros(2)
        if epistemic and mode is ForceMode.STOCHASTIC:
            if not self.epistemic_active:
                raise CrowdForecastUsageError("Residual sampling needs a model trained through phase 2")
            epsilon = cvae_sample(self.params.cvae, history, aleatoric_position, rng,
                                  self.settings.sigma_latent, self.settings.feature_scale)
        output = sde_step(state, force, epsilon, self.settings.dt, coefficients)
        return StepDraw(output, MappingProxyType(noise), aleatoric_position)


@dataclass(frozen=True, eq=False)
class RolloutRecord:
    """A multi-step rollout; with `record` it also keeps what rollout_backward needs."""
    positions: np.ndarray
    velocities: np.ndarray
    plans: Tuple[StepPlan, ...]
    draws: Tuple[StepDraw, ...]
    warmup: Tuple[Dict, ...] = ()

    def distributions(self) -> Tuple[Tuple[ForceDistribution, ...], ...]:
        return tuple(tuple(plan.distributions()) for plan in self.plans)


def window_context(window: Window, step: int) -> Tuple[np.ndarray, np.ndarray]:
    """Neighbor rows and obstacle points used at prediction step `step` (recorded ground truth)."""
    frame_index = len(window.observed) - 1 + step
    return window.neighbor_matrix(frame_index), window.obstacles_at(frame_index)


def warm_start(model: SocialPhysicsModel, window: Window, record: bool = False
               ) -> Tuple[Dict[FactorKind, Tuple[np.ndarray, np.ndarray]], Tuple[Dict, ...]]:
    """Zero LSTM states advanced through every observed state except the last."""
    recurrent = model.initial_recurrent()
    caches = []
    for state in window.observed[:-1]:
        recurrent, cache = model.observe(state, recurrent, record)
        caches.append(cache)
    return recurrent, tuple(caches)


def rollout(model: SocialPhysicsModel, window: Window, goal: np.ndarray, rng: np.random.Generator,
            mode: Optional[ForceMode] = None, epistemic: bool = False, record: bool = False,
            diagnostics: Optional[Diagnostics] = None) -> RolloutRecord:
    """
    Predicts the window's future from its last observed state.

    Step s uses the neighbor/obstacle context at observed index t_h + s and
    steps_remaining = t_f - s.
    """
    horizon = window.horizon
    recurrent, warmup = warm_start(model, window, record)
    state = window.observed[-1]
    path = list(window.observed_positions())
    positions, velocities, plans, draws = [], [], [], []
    for step in range(horizon):
        neighbors, obstacles = window_context(window, step)
        plan = model.evaluate(state, goal, horizon - step, neighbors, obstacles, recurrent, rng, diagnostics, record)
        drawn = model.draw(plan, rng, mode, np.array(path), epistemic)
        state = drawn.output.state
        recurrent = plan.recurrent
        path.append(state.position)
        positions.append(state.position)
        velocities.append(state.velocity)
        plans.append(plan)
        draws.append(drawn)
    return RolloutRecord(np.array(positions).reshape(-1, 2), np.array(velocities).reshape(-1, 2),
                         tuple(plans), tuple(draws), warmup)


def assemble_forces(model: SocialPhysicsModel, window: Window, step: int, state: AgentState, goal: np.ndarray,
                    recurrent: Recurrent, rng: np.random.Generator, mode: ForceMode
                    ) -> Tuple[List[ForceDistribution], np.ndarray, StepPlan]:
    """
    Every factor's ForceDistribution at one step of a window, and one sampled total force.

    Returns:
        Tuple: the distributions (goal, one per neighbor, one per obstacle), the
        total force and the plan carrying the advanced recurrent state.
    """
    neighbors, obstacles = window_context(window, step)
    plan = model.evaluate(state, goal, window.horizon - step, neighbors, obstacles, recurrent, rng)
    drawn = model.draw(plan, rng, mode)
    force = (drawn.output.velocity - state.velocity) / model.settings.dt
    return plan.distributions(), force, plan


@dataclass(frozen=True)
class CoefficientGradient:
    """Direct loss gradients on one factor's sampled coefficients and Gaussian parameters."""
    d_k: np.ndarray
    d_mean: np.ndarray
    d_log_std: np.ndarray


def rollout_backward(model: SocialPhysicsModel, record: RolloutRecord, d_positions: np.ndarray,
                     coefficient_grads: Sequence[Mapping[FactorKind, CoefficientGradient]]) -> ParamDict:
    """
    Parameter gradients of a recorded rollout.

    Parameters:
        model: the model that produced the record (same parameter arrays).
        record: a rollout run with record=True.
        d_positions: loss gradient on each predicted position (t_f, 2).
        coefficient_grads: per step, direct gradients on the learned factors'
            coefficients (from the log-density terms).

    Returns:
        ParamDict: gradients for every learned parameter path.
    """
    settings = model.settings
    dt = settings.dt
    grads: ParamDict = {}
    carry = {kind: (np.zeros_like(h), np.zeros_like(c)) for kind, (h, c) in model.initial_recurrent().items()}
    d_position = np.array(d_positions[-1], dtype=np.float64)
    d_velocity = np.zeros(2)
    for step in range(len(record.plans) - 1, -1, -1):
        plan, drawn = record.plans[step], record.draws[step]
        d_velocity_out = d_velocity + d_position * dt
        d_force = d_velocity_out * dt
        d_p, d_v = d_position.copy(), d_velocity_out.copy()
        step_grads = coefficient_grads[step] if step < len(coefficient_grads) else {}
        for terms in plan.terms:
            k = drawn.output.coefficients[terms.kind]
            if len(k) == 0 and not terms.learned:
                continue
            d_base = k[:, None] * d_force[None, :]
            if len(k):
                d_p += np.einsum("nij,ni->j", terms.jacobians, d_base)
            if terms.kind is FactorKind.GOAL:
                d_v -= d_base.sum(axis=0)
            if not terms.learned:
                continue
            direct = step_grads.get(terms.kind)
            d_k = terms.bases @ d_force
            if direct is not None:
                d_k = d_k + direct.d_k
            xi = drawn.noise[terms.kind]
            d_mean = d_k + (direct.d_mean if direct is not None else 0.0)
            d_log_std = d_k * terms.std * xi + (direct.d_log_std if direct is not None else 0.0)
            if terms.kind is FactorKind.ENVIRONMENT:
                mask = np.abs(terms.raw_log_std) <= LOG_SCALE_CLAMP
                accumulate(grads, {"env/mu": np.array([d_mean.sum()]),
                                   "env/log_sigma": np.array([(d_log_std * mask).sum()])})
                continue
            if terms.cache is None:
                raise CrowdForecastUsageError("Rollout was not recorded; run it with record=True")
            prefix = _PREFIX[terms.kind]
            shaped_mean = d_mean if terms.kind is FactorKind.COLLISION else d_mean[0]
            shaped_log_std = d_log_std if terms.kind is FactorKind.COLLISION else d_log_std[0]
            net_grads, d_state, d_context, dh, dc = coefficient_backward(
                model._net(terms.kind), prefix, terms.cache, shaped_mean, shaped_log_std, *carry[terms.kind])
            carry[terms.kind] = (dh, dc)
            accumulate(grads, net_grads)
            d_state = settings.feature_scale * d_state
            if terms.kind is FactorKind.COLLISION and len(d_context):
                d_state = d_state - settings.feature_scale * d_context.sum(axis=0)
            d_p += d_state[:2]
            d_v += d_state[2:]
        if step >= 1:
            d_position = d_p + d_positions[step - 1]
            d_velocity = d_v
    for caches in reversed(record.warmup):
        for kind, cache in caches.items():
            net_grads, dh, dc = encode_state_backward(model._net(kind), _PREFIX[kind], cache, *carry[kind])
            carry[kind] = (dh, dc)
            accumulate(grads, net_grads)
    return grads


@dataclass(frozen=True, eq=False)
class ResidualRows:
    """One-step residual targets r = p - p_bar with their CVAE condition rows."""
    residuals: np.ndarray
    conditions: np.ndarray


def residual_rows(model: SocialPhysicsModel, windows: Sequence[Window], history_length: int) -> ResidualRows:
    """
    Ground-truth-fed mean-mode one-step predictions along each ground-truth future.

    The condition pairs the ground-truth history ending at p^t with p_bar^{t+1}.
    """
    residuals, conditions = [], []
    rng = np.random.default_rng(0)
    for window in windows:
        recurrent, _ = warm_start(model, window)
        truth_velocities = window_velocities(window)
        state = window.observed[-1]
        path = list(window.observed_positions())
        for step in range(window.horizon):
            neighbors, obstacles = window_context(window, step)
            plan = model.evaluate(state, window.destination, window.horizon - step, neighbors, obstacles,
                                  recurrent, rng)
            drawn = model.draw(plan, rng, ForceMode.MEAN)
            residuals.append(window.future[step] - drawn.aleatoric_position)
            conditions.append(condition_vector(np.array(path), drawn.aleatoric_position, history_length,
                                               model.settings.feature_scale))
            recurrent = plan.recurrent
            state = AgentState(window.future[step], truth_velocities[step])
            path.append(window.future[step])
    return ResidualRows(np.array(residuals).reshape(-1, 2),
                        np.array(conditions).reshape(len(residuals), -1))
