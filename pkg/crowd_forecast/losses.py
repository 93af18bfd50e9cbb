"""
Variational objective of the force coefficients and the residual CVAE objective.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import CrowdForecastContractError, CrowdForecastShapeError
from .networks import Cvae, cvae_train_backward, cvae_train_forward
from .nn import ParamDict, accumulate
from .rollout import CoefficientGradient, RolloutRecord, SocialPhysicsModel, rollout, rollout_backward
from .types import FactorKind, ForceMode, LossBreakdown, PriorSpec, Window

logger = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def log_q(k: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """
    Diagonal Gaussian log-density summed over coefficients.

    Raises:
        CrowdForecastContractError: if any sigma <= 0.
    """
    k, mu, sigma = (np.asarray(x, dtype=np.float64) for x in (k, mu, sigma))
    if np.any(sigma <= 0):
        raise CrowdForecastContractError("Posterior sigma must be positive")
    return float(np.sum(-(k - mu) ** 2 / (2.0 * sigma ** 2) - np.log(sigma) - LOG_SQRT_2PI))


def log_prior(k: np.ndarray, prior: PriorSpec) -> float:
    k = np.asarray(k, dtype=np.float64)
    return log_q(k, np.full(k.shape, prior.mu), np.full(k.shape, prior.sigma))


def log_likelihood(predicted: np.ndarray, truth: np.ndarray) -> float:
    """
    -1/2 sum_t |p_bar^t - p^t|^2 - (t_f / 2) log(2 pi) for one trajectory.

    Raises:
        CrowdForecastShapeError: if the trajectories differ in shape.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise CrowdForecastShapeError(f"Prediction {predicted.shape} and truth {truth.shape} differ")
    return float(-0.5 * np.sum((predicted - truth) ** 2) - len(truth) * LOG_SQRT_2PI)


def kl_diag_gaussian(mu_z: np.ndarray, log_var_z: np.ndarray) -> float:
    """KL(N(mu, diag(exp(log_var))) || N(0, I))."""
    mu_z = np.asarray(mu_z, dtype=np.float64)
    log_var_z = np.asarray(log_var_z, dtype=np.float64)
    return float(0.5 * np.sum(mu_z ** 2 + np.exp(log_var_z) - 1.0 - log_var_z))


def _record_terms(model: SocialPhysicsModel, record: RolloutRecord, priors: Mapping[FactorKind, PriorSpec],
                  with_densities: bool) -> Tuple[float, float, list]:
    """log q, log prior and the direct coefficient gradients of (log q - log prior)."""
    total_q, total_prior = 0.0, 0.0
    coefficient_grads = []
    for plan, drawn in zip(record.plans, record.draws):
        step_grads: Dict[FactorKind, CoefficientGradient] = {}
        for terms in plan.terms:
            if not terms.learned or not with_densities or len(terms.mean) == 0:
                continue
            k = drawn.output.coefficients[terms.kind]
            prior = priors[terms.kind]
            total_q += log_q(k, terms.mean, terms.std)
            total_prior += log_prior(k, prior)
            variance = terms.std ** 2
            step_grads[terms.kind] = CoefficientGradient(
                d_k=-(k - terms.mean) / variance + (k - prior.mu) / prior.sigma ** 2,
                d_mean=(k - terms.mean) / variance,
                d_log_std=(k - terms.mean) ** 2 / variance - 1.0,
            )
        coefficient_grads.append(step_grads)
    return total_q, total_prior, coefficient_grads


def l_bayes_and_gradients(model: SocialPhysicsModel, window: Window, priors: Mapping[FactorKind, PriorSpec],
                          rng: np.random.Generator, mc_samples: int = 1, goal: Optional[np.ndarray] = None,
                          with_gradients: bool = True) -> Tuple[LossBreakdown, ParamDict]:
    """
    Monte-Carlo estimate of E_q[log q - log p(P | k) - log p(k)] and its gradients.

    Coefficients are reparameterized (k = mu + sigma * xi), so gradients flow
    through every sampled rollout. Without aleatoric sampling the rollouts use
    the coefficient means and only the likelihood term remains.

    Parameters:
        model: the model being trained.
        window: one training window.
        priors: prior per coefficient family.
        rng: noise source; sample m uses child stream m.
        mc_samples: number of rollouts averaged.
        goal: destination; defaults to the window's.
        with_gradients: skip the reverse pass when False.

    Returns:
        Tuple[LossBreakdown, ParamDict]: averaged terms and parameter gradients.
    """
    if mc_samples < 1:
        raise CrowdForecastContractError(f"mc_samples must be >= 1, got {mc_samples}")
    goal = window.destination if goal is None else goal
    mode = model.settings.default_mode
    with_densities = mode is ForceMode.STOCHASTIC
    sums = np.zeros(3)
    grads: ParamDict = {}
    for stream in rng.spawn(mc_samples):
        record = rollout(model, window, goal, stream, mode=mode, record=with_gradients)
        q, prior, coefficient_grads = _record_terms(model, record, priors, with_densities)
        likelihood = log_likelihood(record.positions, window.future)
        sums += (q, prior, likelihood)
        if with_gradients:
            d_positions = record.positions - window.future
            accumulate(grads, rollout_backward(model, record, d_positions, coefficient_grads), 1.0 / mc_samples)
    q, prior, likelihood = sums / mc_samples
    return LossBreakdown(log_q=q, log_prior=prior, log_likelihood=likelihood), grads


def l_bayes(model: SocialPhysicsModel, window: Window, priors: Mapping[FactorKind, PriorSpec],
            rng: np.random.Generator, mc_samples: int = 1) -> LossBreakdown:
    breakdown, _ = l_bayes_and_gradients(model, window, priors, rng, mc_samples, with_gradients=False)
    return breakdown


@dataclass(frozen=True)
class CvaeLoss:
    reconstruction: float
    kl: float
    kl_weight: float

    @property
    def total(self) -> float:
        return self.reconstruction + self.kl_weight * self.kl


def l_cvae_and_gradients(cvae: Cvae, residuals: np.ndarray, conditions: np.ndarray, kl_weight: float,
                         rng: np.random.Generator, feature_scale: float = 0.01, prefix: str = "cvae"
                         ) -> Tuple[CvaeLoss, ParamDict]:
    """
    Mean over residual rows of |r - r_bar|^2 + kl_weight * KL(q(z) || N(0, I)).

    Returns:
        Tuple[CvaeLoss, ParamDict]: the mean reconstruction and KL terms and the
        parameter gradients of the total.
    """
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 2)
    rows = len(residuals)
    if rows == 0:
        raise CrowdForecastContractError("The CVAE objective needs at least one residual row")
    reconstructed, mu_z, log_var, cache = cvae_train_forward(cvae, residuals, conditions, rng, feature_scale)
    errors = reconstructed - residuals
    reconstruction = float(np.sum(errors ** 2) / rows)
    kl = float(np.sum(0.5 * (mu_z ** 2 + np.exp(log_var) - 1.0 - log_var)) / rows)
    grads = cvae_train_backward(
        cvae, cache,
        d_reconstructed=2.0 * errors / rows,
        d_mu_z=kl_weight * mu_z / rows,
        d_log_var=kl_weight * 0.5 * (np.exp(log_var) - 1.0) / rows,
        prefix=prefix)
    return CvaeLoss(reconstruction, kl, kl_weight), grads


def l_cvae(cvae: Cvae, residuals: np.ndarray, conditions: np.ndarray, kl_weight: float,
           rng: np.random.Generator, feature_scale: float = 0.01) -> float:
    loss, _ = l_cvae_and_gradients(cvae, residuals, conditions, kl_weight, rng, feature_scale)
    return loss.total


def batch_l_bayes(model: SocialPhysicsModel, windows: Sequence[Window], priors: Mapping[FactorKind, PriorSpec],
                  rngs: Sequence[np.random.Generator], mc_samples: int = 1) -> Tuple[float, ParamDict]:
    """Mean total and mean gradients over a batch, reduced in window order."""
    total = 0.0
    grads: ParamDict = {}
    for window, stream in zip(windows, rngs):
        breakdown, window_grads = l_bayes_and_gradients(model, window, priors, stream, mc_samples)
        total += breakdown.total
        accumulate(grads, window_grads, 1.0 / len(windows))
    return total / len(windows), grads
