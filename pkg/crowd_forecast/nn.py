"""
A small numpy neural-network engine: dense layers, an LSTM cell, reverse-mode
gradients (through time for the LSTM), Adam and finite-difference checks.

Parameters are plain float64 arrays. Updates never write into an existing
array; they return new ones, so a forward cache can tell whether the weights it
was computed with are still current.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import CrowdForecastNumericError, CrowdForecastShapeError, CrowdForecastUsageError
from .types import Activation

logger = logging.getLogger(__name__)

ParamDict = Dict[str, np.ndarray]


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise CrowdForecastShapeError(
                f"Dense layer weights {self.weights.shape} do not match bias {self.bias.shape}")

    @property
    def input_size(self) -> int:
        return self.weights.shape[1]

    @property
    def output_size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class LstmCell:
    """LSTM parameters with the four gates stacked in the order input, forget, candidate, output."""
    weights_x: np.ndarray
    weights_h: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        hidden = self.weights_h.shape[1]
        if (self.weights_h.shape != (4 * hidden, hidden) or self.weights_x.shape[0] != 4 * hidden
                or self.bias.shape != (4 * hidden,)):
            raise CrowdForecastShapeError(
                f"Inconsistent LSTM shapes: x {self.weights_x.shape}, h {self.weights_h.shape}, "
                f"bias {self.bias.shape}")

    @property
    def hidden_size(self) -> int:
        return self.weights_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.weights_x.shape[1]

    def zero_state(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros(self.hidden_size), np.zeros(self.hidden_size)


@dataclass(eq=False)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: ParamDict = field(default_factory=dict)
    second_moment: ParamDict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class MlpCache:
    layers: Tuple[DenseLayer, ...]
    inputs: Tuple[np.ndarray, ...]
    pre_activations: Tuple[np.ndarray, ...]
    squeeze: bool


@dataclass(frozen=True, eq=False)
class LstmCache:
    cell: LstmCell
    x: np.ndarray
    h: np.ndarray
    c: np.ndarray
    gates: np.ndarray
    c_next: np.ndarray
    tanh_c_next: np.ndarray


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], output_activation: Activation = Activation.NONE
             ) -> Tuple[DenseLayer, ...]:
    """Builds layers sizes[0] -> ... -> sizes[-1]; ReLU on hidden layers."""
    layers = []
    for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = index == len(sizes) - 2
        layers.append(DenseLayer(glorot_uniform(rng, fan_out, fan_in), np.zeros(fan_out),
                                 output_activation if last else Activation.RELU))
    return tuple(layers)


def init_lstm(rng: np.random.Generator, input_size: int, hidden_size: int) -> LstmCell:
    return LstmCell(glorot_uniform(rng, 4 * hidden_size, input_size),
                    glorot_uniform(rng, 4 * hidden_size, hidden_size),
                    np.zeros(4 * hidden_size))


def mlp_forward(layers: Sequence[DenseLayer], x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """
    Runs x through the layers; x may be one vector or a batch of rows.

    Returns:
        Tuple[np.ndarray, MlpCache]: the output (same leading shape as x) and the
        activations needed by mlp_backward.

    Raises:
        CrowdForecastShapeError: if x does not match the first layer.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    if h.shape[1] != layers[0].input_size:
        raise CrowdForecastShapeError(f"Expected input of size {layers[0].input_size}, got {h.shape[1]}")
    inputs, pre_activations = [], []
    for layer in layers:
        inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        pre_activations.append(z)
        h = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
    cache = MlpCache(tuple(layers), tuple(inputs), tuple(pre_activations), squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(layers: Sequence[DenseLayer], cache: MlpCache, output_gradient: np.ndarray
                 ) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """
    Reverse-mode pass through a cached forward evaluation.

    Returns:
        Tuple: per-layer (weights gradient, bias gradient) and the input gradient.

    Raises:
        CrowdForecastUsageError: if the cache was produced with other parameters.
    """
    _check_fresh(layers, cache)
    g = np.asarray(output_gradient, dtype=np.float64).reshape(cache.pre_activations[-1].shape)
    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    for layer, h_in, z in zip(reversed(cache.layers), reversed(cache.inputs), reversed(cache.pre_activations)):
        if layer.activation is Activation.RELU:
            g = g * (z > 0)
        grads.append((g.T @ h_in, g.sum(axis=0)))
        g = g @ layer.weights
    grads.reverse()
    return grads, (g[0] if cache.squeeze else g)


def _check_fresh(layers: Sequence[DenseLayer], cache: MlpCache) -> None:
    if len(layers) != len(cache.layers) or any(
            layer.weights is not cached.weights or layer.bias is not cached.bias
            for layer, cached in zip(layers, cache.layers)):
        raise CrowdForecastUsageError("Stale cache: the layers changed since the forward pass")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(cell: LstmCell, x: np.ndarray, h: np.ndarray, c: np.ndarray
              ) -> Tuple[np.ndarray, np.ndarray, LstmCache]:
    """
    One LSTM step: i, f, o = sigmoid(...), g = tanh(...), c' = f*c + i*g, h' = o*tanh(c').

    Raises:
        CrowdForecastShapeError: on mismatched input or state sizes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cell.input_size,) or h.shape != (cell.hidden_size,) or c.shape != (cell.hidden_size,):
        raise CrowdForecastShapeError(
            f"LSTM expects input {cell.input_size} and state {cell.hidden_size}, "
            f"got {x.shape}, {h.shape}, {c.shape}")
    size = cell.hidden_size
    a = cell.weights_x @ x + cell.weights_h @ h + cell.bias
    gates = np.empty_like(a)
    gates[:2 * size] = _sigmoid(a[:2 * size])
    gates[2 * size:3 * size] = np.tanh(a[2 * size:3 * size])
    gates[3 * size:] = _sigmoid(a[3 * size:])
    i, f, g, o = np.split(gates, 4)
    c_next = f * c + i * g
    tanh_c_next = np.tanh(c_next)
    h_next = o * tanh_c_next
    return h_next, c_next, LstmCache(cell, x, h, c, gates, c_next, tanh_c_next)


def lstm_step_backward(cell: LstmCell, cache: LstmCache, dh_next: np.ndarray, dc_next: np.ndarray
                       ) -> Tuple[ParamDict, np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of one step given the gradients flowing into h' and c'.

    Returns:
        Tuple: parameter gradients (keys weights_x, weights_h, bias), dx, dh, dc.
    """
    if (cache.cell.weights_x is not cell.weights_x or cache.cell.weights_h is not cell.weights_h
            or cache.cell.bias is not cell.bias):
        raise CrowdForecastUsageError("Stale cache: the LSTM cell changed since the forward pass")
    i, f, g, o = np.split(cache.gates, 4)
    do = dh_next * cache.tanh_c_next
    dc = dc_next + dh_next * o * (1.0 - cache.tanh_c_next ** 2)
    da = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * cache.c * f * (1.0 - f),
        dc * i * (1.0 - g ** 2),
        do * o * (1.0 - o),
    ])
    grads = {
        "weights_x": np.outer(da, cache.x),
        "weights_h": np.outer(da, cache.h),
        "bias": da,
    }
    return grads, cell.weights_x.T @ da, cell.weights_h.T @ da, dc * f


def lstm_backward(cell: LstmCell, caches: Sequence[LstmCache], hidden_gradients: Sequence[np.ndarray],
                  dh_final: Optional[np.ndarray] = None, dc_final: Optional[np.ndarray] = None
                  ) -> Tuple[ParamDict, List[np.ndarray]]:
    """
    Backpropagation through time over a cached sequence.

    Parameters:
        cell: the cell used by the forward steps.
        caches: one cache per step, in forward order.
        hidden_gradients: gradient of the loss w.r.t. each step's output hidden state.
        dh_final, dc_final: extra gradients on the last hidden and cell state.

    Returns:
        Tuple[ParamDict, List[np.ndarray]]: accumulated parameter gradients and
        the gradient w.r.t. each step's input.
    """
    dh = np.zeros(cell.hidden_size) if dh_final is None else dh_final
    dc = np.zeros(cell.hidden_size) if dc_final is None else dc_final
    total = {"weights_x": np.zeros_like(cell.weights_x),
             "weights_h": np.zeros_like(cell.weights_h),
             "bias": np.zeros_like(cell.bias)}
    input_gradients: List[np.ndarray] = [np.zeros(0)] * len(caches)
    for index in range(len(caches) - 1, -1, -1):
        grads, dx, dh, dc = lstm_step_backward(cell, caches[index], dh + hidden_gradients[index], dc)
        for key in total:
            total[key] += grads[key]
        input_gradients[index] = dx
    return total, input_gradients


def adam_update(state: AdamState, params: ParamDict, grads: ParamDict) -> ParamDict:
    """
    One bias-corrected Adam step on every parameter that has a gradient.

    Parameters:
        state: optimizer state; its moments and step counter are advanced.
        params: current parameters by path.
        grads: gradients by path; paths without a gradient are left untouched.

    Returns:
        ParamDict: new parameter arrays (the inputs are not modified).

    Raises:
        CrowdForecastNumericError: if a gradient holds NaN or infinity.
        CrowdForecastShapeError: if a gradient does not match its parameter.
    """
    for key, grad in grads.items():
        if grad.shape != params[key].shape:
            raise CrowdForecastShapeError(f"Gradient for {key} has shape {grad.shape}, expected {params[key].shape}")
        if not np.all(np.isfinite(grad)):
            raise CrowdForecastNumericError(
                f"Non-finite gradient for {key}",
                {"parameter": key, "step": state.step, "nan": int(np.isnan(grad).sum()),
                 "inf": int(np.isinf(grad).sum())})
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = dict(params)
    for key, grad in grads.items():
        m = state.beta1 * state.first_moment.get(key, np.zeros_like(grad)) + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moment.get(key, np.zeros_like(grad)) + (1.0 - state.beta2) * grad * grad
        state.first_moment[key] = m
        state.second_moment[key] = v
        if state.lr == 0:
            updated[key] = params[key].copy()
            continue
        updated[key] = params[key] - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return updated


def numerical_gradient(loss: Callable[[ParamDict], float], params: ParamDict, key: str,
                       h: float = 1e-5, indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """
    Central finite differences of `loss` w.r.t. params[key].

    Only the listed indices are perturbed when given; other entries stay zero.
    """
    base = params[key]
    gradient = np.zeros_like(base)
    targets = indices if indices is not None else list(np.ndindex(base.shape))
    for index in targets:
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe[index] += sign * h
            value = loss({**params, key: probe})
            gradient[index] += sign * value / (2.0 * h)
    return gradient


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def gradient_check(loss: Callable[[ParamDict], float], params: ParamDict, grads: ParamDict,
                   h: float = 1e-5, samples_per_key: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None, floor: float = 1e-8) -> Dict[str, float]:
    """
    Compares analytic gradients against central finite differences.

    Parameters:
        loss: maps a parameter dict to a scalar.
        params: the point to check at.
        grads: analytic gradients by path.
        h: finite-difference step.
        samples_per_key: check only this many random entries per array.
        rng: generator choosing the sampled entries.
        floor: denominator floor of the relative error.

    Returns:
        Dict[str, float]: the worst relative error per parameter path.
    """
    rng = rng or np.random.default_rng(0)
    errors: Dict[str, float] = {}
    for key in grads:
        shape = params[key].shape
        all_indices = list(np.ndindex(shape))
        if samples_per_key is not None and len(all_indices) > samples_per_key:
            chosen = rng.choice(len(all_indices), size=samples_per_key, replace=False)
            indices = [all_indices[i] for i in chosen]
        else:
            indices = all_indices
        numeric = numerical_gradient(loss, params, key, h, indices)
        picks = tuple(np.array(indices).T) if indices else ()
        errors[key] = relative_error(grads[key][picks], numeric[picks], floor) if indices else 0.0
    worst = max(errors.values()) if errors else 0.0
    logger.debug("Gradient check", extra={"event": "gradient_check", "worst_relative_error": worst})
    return errors


def layers_to_params(prefix: str, layers: Sequence[DenseLayer]) -> ParamDict:
    params: ParamDict = {}
    for index, layer in enumerate(layers):
        params[f"{prefix}/{index}/weights"] = layer.weights
        params[f"{prefix}/{index}/bias"] = layer.bias
    return params


def layers_from_params(prefix: str, layers: Sequence[DenseLayer], params: ParamDict) -> Tuple[DenseLayer, ...]:
    return tuple(
        DenseLayer(params.get(f"{prefix}/{index}/weights", layer.weights),
                   params.get(f"{prefix}/{index}/bias", layer.bias),
                   layer.activation)
        for index, layer in enumerate(layers))


def layer_grads_to_params(prefix: str, grads: Sequence[Tuple[np.ndarray, np.ndarray]]) -> ParamDict:
    out: ParamDict = {}
    for index, (weights, bias) in enumerate(grads):
        out[f"{prefix}/{index}/weights"] = weights
        out[f"{prefix}/{index}/bias"] = bias
    return out


def accumulate(total: ParamDict, grads: ParamDict, scale: float = 1.0) -> None:
    """Adds grads into total in place (keys are created on first use)."""
    for key, value in grads.items():
        if key in total:
            total[key] = total[key] + scale * value
        else:
            total[key] = scale * value
