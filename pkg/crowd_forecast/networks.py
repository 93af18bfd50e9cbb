"""
Learnable components: the goal network, the collision network, the environment
Gaussian and the residual CVAE, plus their forward and backward passes.

Every network predicts a coefficient's mean and log-std; log-scales are clamped
to +/- LOG_SCALE_CLAMP before exp and receive no gradient while clamped.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Tuple

import numpy as np

from .constants import HISTORY_LENGTH, LOG_SCALE_CLAMP
from .exceptions import CrowdForecastConfigError, CrowdForecastNumericError, CrowdForecastShapeError
from .nn import (
    DenseLayer,
    LstmCache,
    LstmCell,
    MlpCache,
    ParamDict,
    accumulate,
    init_lstm,
    init_mlp,
    layer_grads_to_params,
    layers_from_params,
    layers_to_params,
    lstm_step,
    lstm_step_backward,
    mlp_backward,
    mlp_forward,
)
from .types import Activation, AgentState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Architecture:
    """Layer widths of every network; `full` is the standard size, `compact` a small variant for quick runs."""
    name: str
    encoder_pre: int
    lstm_hidden: int
    encoder_post: int
    context_encoder: Tuple[int, ...]
    head: Tuple[int, ...]
    residual_encoder: Tuple[int, ...]
    condition_encoder: Tuple[int, ...]
    latent_encoder: Tuple[int, ...]
    decoder: Tuple[int, ...]
    history_length: int = HISTORY_LENGTH

    @property
    def latent_dim(self) -> int:
        return self.latent_encoder[-1] // 2

    @property
    def condition_size(self) -> int:
        return 2 * (self.history_length + 1) + 2

    @classmethod
    def named(cls, name: str) -> "Architecture":
        try:
            return ARCHITECTURES[name]
        except KeyError:
            raise CrowdForecastConfigError(
                f"Invalid architecture: {name}. Valid options are: {sorted(ARCHITECTURES)}") from None


ARCHITECTURES: Dict[str, Architecture] = {
    "full": Architecture(
        name="full", encoder_pre=64, lstm_hidden=256, encoder_post=16,
        context_encoder=(64, 256, 16), head=(512, 256, 512),
        residual_encoder=(8, 16, 16), condition_encoder=(512, 256, 16),
        latent_encoder=(8, 50, 32), decoder=(1024, 512, 1024)),
    "compact": Architecture(
        name="compact", encoder_pre=16, lstm_hidden=16, encoder_post=8,
        context_encoder=(16, 8), head=(32, 16),
        residual_encoder=(8, 8), condition_encoder=(32, 8),
        latent_encoder=(16, 8), decoder=(32, 32)),
}


@dataclass(frozen=True, eq=False)
class CoefficientNet:
    """
    Shared wiring of the goal and collision networks.

    The agent's own state goes through a dense layer, an LSTM and a dense layer;
    a context vector (destination for the goal network, a neighbor's relative
    state for the collision network) has its own MLP; the head maps both
    encodings to (mean, log-std) of the coefficient.
    """
    pre: Tuple[DenseLayer, ...]
    lstm: LstmCell
    post: Tuple[DenseLayer, ...]
    context: Tuple[DenseLayer, ...]
    head: Tuple[DenseLayer, ...]

    @classmethod
    def initialize(cls, rng: np.random.Generator, architecture: Architecture, context_size: int) -> "CoefficientNet":
        return cls(
            pre=init_mlp(rng, (4, architecture.encoder_pre), Activation.RELU),
            lstm=init_lstm(rng, architecture.encoder_pre, architecture.lstm_hidden),
            post=init_mlp(rng, (architecture.lstm_hidden, architecture.encoder_post)),
            context=init_mlp(rng, (context_size, *architecture.context_encoder)),
            head=init_mlp(rng, (architecture.encoder_post + architecture.context_encoder[-1], *architecture.head, 2)),
        )

    def parameters(self, prefix: str) -> ParamDict:
        params = {
            **layers_to_params(f"{prefix}/pre", self.pre),
            f"{prefix}/lstm/weights_x": self.lstm.weights_x,
            f"{prefix}/lstm/weights_h": self.lstm.weights_h,
            f"{prefix}/lstm/bias": self.lstm.bias,
            **layers_to_params(f"{prefix}/post", self.post),
            **layers_to_params(f"{prefix}/context", self.context),
            **layers_to_params(f"{prefix}/head", self.head),
        }
        return params

    def assign(self, prefix: str, params: ParamDict) -> "CoefficientNet":
        return CoefficientNet(
            pre=layers_from_params(f"{prefix}/pre", self.pre, params),
            lstm=LstmCell(params.get(f"{prefix}/lstm/weights_x", self.lstm.weights_x),
                          params.get(f"{prefix}/lstm/weights_h", self.lstm.weights_h),
                          params.get(f"{prefix}/lstm/bias", self.lstm.bias)),
            post=layers_from_params(f"{prefix}/post", self.post, params),
            context=layers_from_params(f"{prefix}/context", self.context, params),
            head=layers_from_params(f"{prefix}/head", self.head, params),
        )


GoalNet = CoefficientNet
CollisionNet = CoefficientNet


@dataclass(frozen=True, eq=False)
class EnvGaussian:
    """Scene-wide coefficient of obstacle repulsion, learned directly as (mean, log-std)."""
    mu: np.ndarray
    log_sigma: np.ndarray

    @classmethod
    def initialize(cls) -> "EnvGaussian":
        return cls(np.zeros(1), np.zeros(1))

    @property
    def sigma(self) -> float:
        return float(np.exp(np.clip(self.log_sigma[0], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)))


@dataclass(frozen=True, eq=False)
class Cvae:
    residual_encoder: Tuple[DenseLayer, ...]
    condition_encoder: Tuple[DenseLayer, ...]
    latent_encoder: Tuple[DenseLayer, ...]
    decoder: Tuple[DenseLayer, ...]
    history_length: int = HISTORY_LENGTH

    @classmethod
    def initialize(cls, rng: np.random.Generator, architecture: Architecture) -> "Cvae":
        latent = architecture.latent_dim
        return cls(
            residual_encoder=init_mlp(rng, (2, *architecture.residual_encoder)),
            condition_encoder=init_mlp(rng, (architecture.condition_size, *architecture.condition_encoder)),
            latent_encoder=init_mlp(rng, (architecture.residual_encoder[-1] + architecture.condition_encoder[-1],
                                          *architecture.latent_encoder)),
            decoder=init_mlp(rng, (latent + architecture.condition_encoder[-1], *architecture.decoder, 2)),
            history_length=architecture.history_length,
        )

    @property
    def latent_dim(self) -> int:
        return self.latent_encoder[-1].output_size // 2

    _GROUPS = ("residual_encoder", "condition_encoder", "latent_encoder", "decoder")

    def parameters(self, prefix: str = "cvae") -> ParamDict:
        params: ParamDict = {}
        for group in self._GROUPS:
            params.update(layers_to_params(f"{prefix}/{group}", getattr(self, group)))
        return params

    def assign(self, prefix: str, params: ParamDict) -> "Cvae":
        return replace(self, **{group: layers_from_params(f"{prefix}/{group}", getattr(self, group), params)
                                for group in self._GROUPS})


@dataclass(frozen=True, eq=False)
class ModelParams:
    """All learnable parameters, addressed by paths `gn/*`, `cn/*`, `env/*` and `cvae/*`."""
    architecture: Architecture
    goal: CoefficientNet
    collision: CoefficientNet
    environment: EnvGaussian
    cvae: Cvae

    @classmethod
    def initialize(cls, rng: np.random.Generator, architecture: Architecture) -> "ModelParams":
        return cls(
            architecture=architecture,
            goal=CoefficientNet.initialize(rng, architecture, context_size=2),
            collision=CoefficientNet.initialize(rng, architecture, context_size=4),
            environment=EnvGaussian.initialize(),
            cvae=Cvae.initialize(rng, architecture),
        )

    def parameters(self) -> ParamDict:
        return {
            **self.goal.parameters("gn"),
            **self.collision.parameters("cn"),
            "env/mu": self.environment.mu,
            "env/log_sigma": self.environment.log_sigma,
            **self.cvae.parameters("cvae"),
        }

    def assign(self, params: ParamDict) -> "ModelParams":
        """Returns a copy with the given paths replaced; unknown paths are rejected."""
        known = self.parameters()
        for key, value in params.items():
            if key not in known:
                raise CrowdForecastShapeError(f"Unknown parameter path: {key}")
            if np.shape(value) != known[key].shape:
                raise CrowdForecastShapeError(
                    f"Parameter {key} has shape {np.shape(value)}, expected {known[key].shape}")
        return ModelParams(
            architecture=self.architecture,
            goal=self.goal.assign("gn", params),
            collision=self.collision.assign("cn", params),
            environment=EnvGaussian(params.get("env/mu", self.environment.mu),
                                    params.get("env/log_sigma", self.environment.log_sigma)),
            cvae=self.cvae.assign("cvae", params),
        )


@dataclass(frozen=True, eq=False)
class CoefficientCache:
    pre: MlpCache
    lstm: LstmCache
    post: MlpCache
    context: MlpCache
    head: MlpCache
    raw_log_sigma: np.ndarray


def clamp_log_scale(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns the clamped value and a mask of entries that still pass gradient."""
    clamped = np.clip(raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    return clamped, np.abs(raw) <= LOG_SCALE_CLAMP


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise CrowdForecastNumericError(f"Non-finite input to {name}", {"network": name})


def coefficient_forward(net: CoefficientNet, state_features: np.ndarray, context_features: np.ndarray,
                        lstm_state: Tuple[np.ndarray, np.ndarray]
                        ) -> Tuple[np.ndarray, np.ndarray, Tuple[np.ndarray, np.ndarray], CoefficientCache]:
    """
    Evaluates a coefficient network for one step.

    Parameters:
        state_features: scaled own state (4,).
        context_features: scaled context, one row (k,) or a batch (n, k).
        lstm_state: (h, c) carried from the previous step.

    Returns:
        Tuple: means, clamped log-stds (scalars or (n,) arrays matching the
        context), the advanced LSTM state and the cache for the backward pass.
    """
    _check_finite("coefficient network", state_features, context_features)
    pre, pre_cache = mlp_forward(net.pre, state_features)
    h, c, lstm_cache = lstm_step(net.lstm, pre, *lstm_state)
    encoded, post_cache = mlp_forward(net.post, h)
    context, context_cache = mlp_forward(net.context, context_features)
    if context.ndim == 1:
        joined = np.concatenate([encoded, context])
    else:
        joined = np.hstack([np.broadcast_to(encoded, (len(context), len(encoded))), context])
    out, head_cache = mlp_forward(net.head, joined)
    raw_log_sigma = out[..., 1]
    log_sigma, _ = clamp_log_scale(raw_log_sigma)
    cache = CoefficientCache(pre_cache, lstm_cache, post_cache, context_cache, head_cache, raw_log_sigma)
    return out[..., 0], log_sigma, (h, c), cache


def coefficient_backward(net: CoefficientNet, prefix: str, cache: CoefficientCache,
                         d_mu: np.ndarray, d_log_sigma: np.ndarray,
                         dh_next: np.ndarray, dc_next: np.ndarray
                         ) -> Tuple[ParamDict, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward pass of one coefficient_forward call.

    Parameters:
        d_mu, d_log_sigma: loss gradients on the outputs (matching their shapes).
        dh_next, dc_next: gradients on the LSTM state this step produced.

    Returns:
        Tuple: parameter gradients (paths under prefix), gradient on the state
        features, on the context features, and on the previous LSTM (h, c).
    """
    _, mask = clamp_log_scale(cache.raw_log_sigma)
    d_out = np.stack([np.asarray(d_mu, dtype=np.float64), np.asarray(d_log_sigma) * mask], axis=-1)
    grads: ParamDict = {}
    head_grads, d_joined = mlp_backward(net.head, cache.head, d_out)
    accumulate(grads, layer_grads_to_params(f"{prefix}/head", head_grads))
    post_size = net.post[-1].output_size
    if d_joined.ndim == 1:
        d_encoded, d_context = d_joined[:post_size], d_joined[post_size:]
    else:
        d_encoded, d_context = d_joined[:, :post_size].sum(axis=0), d_joined[:, post_size:]
    context_grads, d_context_features = mlp_backward(net.context, cache.context, d_context)
    accumulate(grads, layer_grads_to_params(f"{prefix}/context", context_grads))
    post_grads, dh = mlp_backward(net.post, cache.post, d_encoded)
    accumulate(grads, layer_grads_to_params(f"{prefix}/post", post_grads))
    lstm_grads, d_pre, dh_prev, dc_prev = lstm_step_backward(net.lstm, cache.lstm, dh + dh_next, dc_next)
    accumulate(grads, {f"{prefix}/lstm/{key}": value for key, value in lstm_grads.items()})
    pre_grads, d_state = mlp_backward(net.pre, cache.pre, d_pre)
    accumulate(grads, layer_grads_to_params(f"{prefix}/pre", pre_grads))
    return grads, d_state, d_context_features, dh_prev, dc_prev


def state_features(state: AgentState, feature_scale: float) -> np.ndarray:
    return feature_scale * np.concatenate([state.position, state.velocity])


def gn_forward(net: CoefficientNet, state: AgentState, destination: np.ndarray,
               lstm_state: Tuple[np.ndarray, np.ndarray], feature_scale: float = 0.01
               ) -> Tuple[float, float, Tuple[np.ndarray, np.ndarray]]:
    """
    Goal coefficient (mean, log-std) for one step.

    Raises:
        CrowdForecastNumericError: if the state or destination is not finite.
    """
    mu, log_sigma, lstm_state, _ = coefficient_forward(
        net, state_features(state, feature_scale), feature_scale * np.asarray(destination, dtype=np.float64),
        lstm_state)
    return float(mu), float(log_sigma), lstm_state


def neighbor_features(state: AgentState, neighbors: np.ndarray, feature_scale: float) -> np.ndarray:
    """Neighbor rows (n, 4) of [x, y, vx, vy] as scaled offsets from the agent."""
    own = np.concatenate([state.position, state.velocity])
    return feature_scale * (np.asarray(neighbors, dtype=np.float64).reshape(-1, 4) - own)


def cn_forward(net: CoefficientNet, self_state: AgentState, neighbors: np.ndarray,
               lstm_state: Tuple[np.ndarray, np.ndarray], feature_scale: float = 0.01
               ) -> Tuple[np.ndarray, np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """
    Collision coefficients for every neighbor of one agent.

    The agent's own LSTM advances once; the neighbor encoder and head run once
    per neighbor row. With no neighbors, empty arrays are returned.
    """
    mu, log_sigma, lstm_state, _ = coefficient_forward(
        net, state_features(self_state, feature_scale), neighbor_features(self_state, neighbors, feature_scale),
        lstm_state)
    return mu, log_sigma, lstm_state


@dataclass(frozen=True, eq=False)
class CvaeCache:
    residual: MlpCache
    condition: MlpCache
    latent: MlpCache
    decoder: MlpCache
    noise: np.ndarray
    raw_log_var: np.ndarray
    log_var: np.ndarray


def condition_vector(history: np.ndarray, predicted_next: np.ndarray, history_length: int,
                     feature_scale: float) -> np.ndarray:
    """
    Flattened condition input: the last history_length + 1 positions, left-padded
    with the earliest one, followed by the predicted next position.
    """
    history = np.asarray(history, dtype=np.float64).reshape(-1, 2)
    if len(history) == 0:
        raise CrowdForecastShapeError("History needs at least one position")
    needed = history_length + 1
    if len(history) < needed:
        history = np.vstack([np.repeat(history[:1], needed - len(history), axis=0), history])
    history = history[-needed:]
    return feature_scale * np.concatenate([history.ravel(), np.asarray(predicted_next, dtype=np.float64).reshape(2)])


def cvae_train_forward(cvae: Cvae, residual: np.ndarray, conditions: np.ndarray, rng: np.random.Generator,
                       feature_scale: float = 0.01
                       ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, CvaeCache]:
    """
    Encodes residuals with their conditions and reconstructs them.

    Parameters:
        cvae: the CVAE.
        residual: residual rows (n, 2) in pixels, or one residual (2,).
        conditions: condition rows (n, condition size) from condition_vector.
        rng: source of the reparameterization noise.
        feature_scale: scale applied to the residual on input.

    Returns:
        Tuple: reconstructed residuals, latent means, clamped latent log-variances
        and the backward cache.
    """
    residual = np.asarray(residual, dtype=np.float64)
    single = residual.ndim == 1
    residual = residual.reshape(-1, 2)
    conditions = np.asarray(conditions, dtype=np.float64).reshape(len(residual), -1)
    if conditions.shape[1] != cvae.condition_encoder[0].input_size:
        raise CrowdForecastShapeError(
            f"Condition size {conditions.shape[1]} does not match {cvae.condition_encoder[0].input_size}")
    encoded_residual, residual_cache = mlp_forward(cvae.residual_encoder, feature_scale * residual)
    encoded_condition, condition_cache = mlp_forward(cvae.condition_encoder, conditions)
    stats, latent_cache = mlp_forward(cvae.latent_encoder, np.hstack([encoded_residual, encoded_condition]))
    latent = cvae.latent_dim
    mu_z, raw_log_var = stats[:, :latent], stats[:, latent:]
    log_var, _ = clamp_log_scale(raw_log_var)
    noise = rng.standard_normal(mu_z.shape)
    z = mu_z + np.exp(0.5 * log_var) * noise
    reconstructed, decoder_cache = mlp_forward(cvae.decoder, np.hstack([z, encoded_condition]))
    cache = CvaeCache(residual_cache, condition_cache, latent_cache, decoder_cache, noise, raw_log_var, log_var)
    if single:
        return reconstructed[0], mu_z[0], log_var[0], cache
    return reconstructed, mu_z, log_var, cache


def cvae_train_backward(cvae: Cvae, cache: CvaeCache, d_reconstructed: np.ndarray, d_mu_z: np.ndarray,
                        d_log_var: np.ndarray, prefix: str = "cvae") -> ParamDict:
    """
    Parameter gradients of a cvae_train_forward batch.

    d_mu_z and d_log_var are the direct loss gradients on the latent statistics
    (the KL term); the path through the sampled latent is added here.
    """
    latent = cvae.latent_dim
    d_reconstructed = np.asarray(d_reconstructed, dtype=np.float64).reshape(-1, 2)
    grads: ParamDict = {}
    decoder_grads, d_decoder_in = mlp_backward(cvae.decoder, cache.decoder, d_reconstructed)
    accumulate(grads, layer_grads_to_params(f"{prefix}/decoder", decoder_grads))
    d_z, d_condition = d_decoder_in[:, :latent], d_decoder_in[:, latent:]
    _, mask = clamp_log_scale(cache.raw_log_var)
    d_mu = np.asarray(d_mu_z).reshape(d_z.shape) + d_z
    d_lv = (np.asarray(d_log_var).reshape(d_z.shape) + d_z * cache.noise * 0.5 * np.exp(0.5 * cache.log_var)) * mask
    latent_grads, d_latent_in = mlp_backward(cvae.latent_encoder, cache.latent, np.hstack([d_mu, d_lv]))
    accumulate(grads, layer_grads_to_params(f"{prefix}/latent_encoder", latent_grads))
    residual_size = cvae.residual_encoder[-1].output_size
    d_condition = d_condition + d_latent_in[:, residual_size:]
    residual_grads, _ = mlp_backward(cvae.residual_encoder, cache.residual, d_latent_in[:, :residual_size])
    accumulate(grads, layer_grads_to_params(f"{prefix}/residual_encoder", residual_grads))
    condition_grads, _ = mlp_backward(cvae.condition_encoder, cache.condition, d_condition)
    accumulate(grads, layer_grads_to_params(f"{prefix}/condition_encoder", condition_grads))
    return grads


def cvae_sample(cvae: Cvae, history: np.ndarray, predicted_next: np.ndarray, rng: np.random.Generator,
                sigma_latent: float = 1.3, feature_scale: float = 0.01) -> np.ndarray:
    """
    Draws a residual: z ~ N(0, sigma_latent^2 I) decoded with the condition feature.
    """
    conditions = condition_vector(history, predicted_next, cvae.history_length, feature_scale)
    encoded_condition, _ = mlp_forward(cvae.condition_encoder, conditions)
    z = sigma_latent * rng.standard_normal(cvae.latent_dim)
    residual, _ = mlp_forward(cvae.decoder, np.concatenate([z, encoded_condition]))
    return residual


def encode_state(net: CoefficientNet, features: np.ndarray, lstm_state: Tuple[np.ndarray, np.ndarray]
                 ) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[MlpCache, LstmCache]]:
    """Advances the LSTM on an observed state without evaluating the head."""
    pre, pre_cache = mlp_forward(net.pre, features)
    h, c, lstm_cache = lstm_step(net.lstm, pre, *lstm_state)
    return (h, c), (pre_cache, lstm_cache)


def encode_state_backward(net: CoefficientNet, prefix: str, caches: Tuple[MlpCache, LstmCache],
                          dh_next: np.ndarray, dc_next: np.ndarray) -> Tuple[ParamDict, np.ndarray, np.ndarray]:
    pre_cache, lstm_cache = caches
    grads: ParamDict = {}
    lstm_grads, d_pre, dh_prev, dc_prev = lstm_step_backward(net.lstm, lstm_cache, dh_next, dc_next)
    accumulate(grads, {f"{prefix}/lstm/{key}": value for key, value in lstm_grads.items()})
    pre_grads, _ = mlp_backward(net.pre, pre_cache, d_pre)
    accumulate(grads, layer_grads_to_params(f"{prefix}/pre", pre_grads))
    return grads, dh_prev, dc_prev
