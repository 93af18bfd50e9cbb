"""
Closed-form social forces and the discretized stochastic step.

Each factor is a base vector times a Gaussian coefficient k. Bases are returned
with their Jacobians w.r.t. the agent position so rollouts can be
differentiated end to end.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .constants import COINCIDENT_DISTANCE
from .exceptions import CrowdForecastContractError, CrowdForecastNumericError
from .types import AgentState, FactorKind, ForceDistribution, ForceMode, StepOutput

logger = logging.getLogger(__name__)


@dataclass
class Diagnostics:
    """Counts numeric events (coincident-point clamps) met while computing forces."""
    clamps: int = 0
    events: List[Dict] = field(default_factory=list)

    def record(self, event: str, **fields) -> None:
        if event == "coincident_clamp":
            self.clamps += 1
        entry = {"event": event, **fields}
        self.events.append(entry)
        logger.warning("Force singularity clamped", extra=entry)


def goal_force_base(p: np.ndarray, v: np.ndarray, p_T: np.ndarray, steps_remaining: int, dt: float) -> np.ndarray:
    """
    Velocity correction towards the destination: (p_T - p) / (steps_remaining * dt) - v.

    Raises:
        CrowdForecastContractError: if steps_remaining < 1 or dt <= 0.
    """
    if steps_remaining < 1:
        raise CrowdForecastContractError(f"steps_remaining must be >= 1, got {steps_remaining}")
    if not dt > 0:
        raise CrowdForecastContractError(f"dt must be positive, got {dt}")
    p, v, p_T = (np.asarray(x, dtype=np.float64) for x in (p, v, p_T))
    return (p_T - p) / (steps_remaining * dt) - v


def _unit_offsets(offsets: np.ndarray, rng: Optional[np.random.Generator],
                  diagnostics: Optional[Diagnostics], kind: FactorKind
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    distances = np.linalg.norm(offsets, axis=1)
    clamped = distances < COINCIDENT_DISTANCE
    units = np.zeros_like(offsets)
    free = ~clamped
    units[free] = offsets[free] / distances[free, None]
    for index in np.flatnonzero(clamped):
        rng = rng if rng is not None else np.random.default_rng(0)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        units[index] = (np.cos(angle), np.sin(angle))
        distances[index] = COINCIDENT_DISTANCE
        if diagnostics is not None:
            diagnostics.record("coincident_clamp", kind=kind.value, index=int(index))
        else:
            logger.warning("Force singularity clamped", extra={"event": "coincident_clamp", "kind": kind.value})
    return distances, units, clamped


def collision_force_bases(offsets: np.ndarray, r_col: float, rng: Optional[np.random.Generator] = None,
                          diagnostics: Optional[Diagnostics] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Repulsion bases for offsets r_ij = p_i - p_j, one row per neighbor.

    Each base is -grad of r_col * exp(-|r| / r_col), i.e. exp(-|r|/r_col) * r/|r|.

    Returns:
        Tuple[np.ndarray, np.ndarray]: bases (n, 2) and their Jacobians d base / d p_i (n, 2, 2);
        clamped rows have a zero Jacobian.
    """
    distances, units, clamped = _unit_offsets(offsets, rng, diagnostics, FactorKind.COLLISION)
    decay = np.exp(-distances / r_col)
    bases = decay[:, None] * units
    outer = units[:, :, None] * units[:, None, :]
    eye = np.eye(2)[None]
    jacobians = decay[:, None, None] * ((eye - outer) / distances[:, None, None] - outer / r_col)
    jacobians[clamped] = 0.0
    return bases, jacobians


def collision_force_base(r_ij: np.ndarray, r_col: float, rng: Optional[np.random.Generator] = None,
                         diagnostics: Optional[Diagnostics] = None) -> np.ndarray:
    bases, _ = collision_force_bases(np.reshape(r_ij, (1, 2)), r_col, rng, diagnostics)
    return bases[0]


def collision_potential(r_ij: np.ndarray, r_col: float) -> float:
    return float(r_col * np.exp(-np.linalg.norm(r_ij) / r_col))


def env_force_bases(offsets: np.ndarray, rng: Optional[np.random.Generator] = None,
                    diagnostics: Optional[Diagnostics] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Obstacle repulsion bases (p - p_obj) / |p - p_obj|^2 with Jacobians w.r.t. p.
    """
    distances, units, clamped = _unit_offsets(offsets, rng, diagnostics, FactorKind.ENVIRONMENT)
    bases = units / distances[:, None]
    outer = units[:, :, None] * units[:, None, :]
    jacobians = (np.eye(2)[None] - 2.0 * outer) / (distances ** 2)[:, None, None]
    jacobians[clamped] = 0.0
    return bases, jacobians


def env_force_base(p: np.ndarray, p_obj: np.ndarray, rng: Optional[np.random.Generator] = None,
                   diagnostics: Optional[Diagnostics] = None) -> np.ndarray:
    offset = np.asarray(p, dtype=np.float64) - np.asarray(p_obj, dtype=np.float64)
    bases, _ = env_force_bases(offset.reshape(1, 2), rng, diagnostics)
    return bases[0]


def sample_coefficients(mean: np.ndarray, std: np.ndarray, rng: np.random.Generator, mode: ForceMode
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draws k = mean + std * xi per coefficient. Mean mode uses k = mean and
    returns zero noise without touching the generator.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    if mode is ForceMode.MEAN:
        return mean.copy(), np.zeros_like(mean)
    noise = rng.standard_normal(mean.shape)
    return mean + std * noise, noise


def summarize(distributions: List[ForceDistribution]) -> Dict[FactorKind, Tuple[np.ndarray, np.ndarray]]:
    """
    Per-factor mean force and per-axis std; terms of one factor are independent,
    so means add and stds add in quadrature.
    """
    summary: Dict[FactorKind, Tuple[np.ndarray, np.ndarray]] = {}
    for distribution in distributions:
        mean, variance = summary.get(distribution.kind, (np.zeros(2), np.zeros(2)))
        summary[distribution.kind] = (mean + distribution.mean_force, variance + distribution.axis_std ** 2)
    return {kind: (mean, np.sqrt(variance)) for kind, (mean, variance) in summary.items()}


def sde_step(state: AgentState, total_force: np.ndarray, epsilon: np.ndarray, dt: float,
             coefficients: Optional[Mapping[FactorKind, np.ndarray]] = None) -> StepOutput:
    """
    Advances one frame: v' = v + F dt, p' = p + v' dt + epsilon.

    Raises:
        CrowdForecastContractError: if dt <= 0.
        CrowdForecastNumericError: if the force or residual is not finite.
    """
    if not dt > 0:
        raise CrowdForecastContractError(f"dt must be positive, got {dt}")
    total_force = np.asarray(total_force, dtype=np.float64).reshape(2)
    epsilon = np.asarray(epsilon, dtype=np.float64).reshape(2)
    if not (np.all(np.isfinite(total_force)) and np.all(np.isfinite(epsilon))):
        raise CrowdForecastNumericError(
            "Non-finite force or residual in step",
            {"force": total_force.tolist(), "epsilon": epsilon.tolist()})
    velocity = state.velocity + total_force * dt
    position = state.position + velocity * dt + epsilon
    return StepOutput(position=position, velocity=velocity, coefficients=dict(coefficients or {}), residual=epsilon)
