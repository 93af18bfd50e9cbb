"""
Two-phase training and checkpoints.

Phase 1 fits the force coefficients by alternating two passes per epoch: the
goal network with the interaction parameters frozen, then the collision
network and environment Gaussian with the goal network frozen. Phase 2 fits
the residual CVAE with everything else frozen.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config import TrainConfig
from .constants import CHECKPOINT_FORMAT_VERSION
from .data import subsample_windows, write_text_atomic
from .exceptions import (
    CrowdForecastCheckpointError,
    CrowdForecastConfigError,
    CrowdForecastContractError,
    CrowdForecastNumericError,
    CrowdForecastParseError,
    CrowdForecastShapeError,
    CrowdForecastTrainingAborted,
)
from .losses import batch_l_bayes, l_cvae_and_gradients
from .networks import Architecture, ModelParams
from .nn import AdamState, ParamDict, adam_update
from .rollout import ModelSettings, SocialPhysicsModel, residual_rows
from .types import CoefficientOverride, FactorKind, TrainingPhase, Window

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

INIT_STREAM = 0
PHASE1_STREAM = 1
PHASE2_STREAM = 2
SUBSAMPLE_STREAM = 3


@dataclass
class TrainingHistory:
    phase1: List[float] = field(default_factory=list)
    phase2: List[float] = field(default_factory=list)
    converged: Dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"phase1": list(self.phase1), "phase2": list(self.phase2), "converged": dict(self.converged)}


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def initial_model(config: TrainConfig,
                  overrides: Optional[Dict[FactorKind, CoefficientOverride]] = None) -> SocialPhysicsModel:
    """Fresh parameters drawn from the configured seed."""
    architecture = Architecture.named(config.config["architecture"])
    params = ModelParams.initialize(stream(config.config["seed"], INIT_STREAM), architecture)
    return SocialPhysicsModel(params, ModelSettings.from_config(config, overrides))


def has_converged(losses: Sequence[float], tolerance: float, patience: int) -> bool:
    """True when each of the last `patience` epochs changed the loss by less than `tolerance` (relative)."""
    if len(losses) <= patience:
        return False
    recent = losses[-(patience + 1):]
    return all(abs(after - before) / max(abs(before), 1e-12) < tolerance
               for before, after in zip(recent[:-1], recent[1:]))


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def _group(params: ParamDict, prefixes: Sequence[str]) -> ParamDict:
    return {key: value for key, value in params.items() if key.split("/", 1)[0] in prefixes}


def _abort(message: str, model: SocialPhysicsModel, history: TrainingHistory, diagnostics: Dict):
    logger.error(message, extra={"event": "training_aborted", **diagnostics})
    return CrowdForecastTrainingAborted(message, last_good=dict(model.params.parameters()),
                                        history=history.to_dict(), diagnostics=diagnostics)


def train_phase1(windows: Sequence[Window], model: SocialPhysicsModel, config: TrainConfig,
                 history: Optional[TrainingHistory] = None) -> Tuple[SocialPhysicsModel, TrainingHistory]:
    """
    Fits the goal, collision and environment parameters by minimizing the
    variational objective.

    Parameters:
        windows: training windows.
        model: the model to start from.
        config: learning rates, epochs, batch size, priors and seed.
        history: history to append to.

    Returns:
        Tuple[SocialPhysicsModel, TrainingHistory]: the trained model and per-epoch mean losses.

    Raises:
        CrowdForecastTrainingAborted: on a non-finite loss or gradient; carries the
        parameters from before the failing update.
    """
    values = config.config
    history = history or TrainingHistory()
    if not windows:
        raise CrowdForecastContractError("Phase 1 needs at least one training window")
    if model.params is None:
        raise CrowdForecastContractError("Phase 1 needs learnable parameters")
    seed = values["seed"]
    if values["train_fraction"] < 1:
        windows = subsample_windows(windows, values["train_fraction"], stream(seed, SUBSAMPLE_STREAM))
    priors = config.priors()
    settings = model.settings
    passes = []
    if settings.learned(FactorKind.GOAL):
        passes.append((("gn",), AdamState(lr=values["lr_goal"])))
    interaction = tuple(prefix for kind, prefix in ((FactorKind.COLLISION, "cn"), (FactorKind.ENVIRONMENT, "env"))
                        if settings.learned(kind))
    if interaction:
        passes.append((interaction, AdamState(lr=values["lr_interaction"])))

    epochs = range(values["epochs_phase1"])
    if values["progress"]:
        epochs = tqdm(epochs, desc="phase 1", unit="epoch")
    for epoch in epochs:
        totals = []
        for pass_index, (prefixes, adam) in enumerate(passes):
            for batch_index, batch in enumerate(_batches(len(windows), values["batch_size"],
                                                         stream(seed, PHASE1_STREAM, epoch, pass_index))):
                batch_windows = [windows[index] for index in batch]
                rngs = [stream(seed, PHASE1_STREAM, epoch, pass_index, batch_index, int(index)) for index in batch]
                try:
                    loss, grads = batch_l_bayes(model, batch_windows, priors, rngs, values["mc_samples"])
                    if not math.isfinite(loss):
                        raise CrowdForecastNumericError("Non-finite loss", {"loss": loss})
                    params = model.params.parameters()
                    updated = adam_update(adam, params, _group(grads, prefixes))
                except CrowdForecastNumericError as exc:
                    raise _abort(f"Phase 1 aborted at epoch {epoch}: {exc}", model, history,
                                 {"epoch": epoch, "pass": pass_index, "batch": batch_index, **exc.diagnostics}) from exc
                model = model.with_params(model.params.assign(_group(updated, prefixes)))
                totals.append(loss)
        epoch_loss = float(np.mean(totals)) if totals else 0.0
        history.phase1.append(epoch_loss)
        logger.info("Phase 1 epoch", extra={"event": "epoch_done", "phase": "1", "epoch": epoch, "loss": epoch_loss})
        if has_converged(history.phase1, values["convergence_tolerance"], values["convergence_patience"]):
            history.converged["1"] = True
            logger.info("Phase 1 converged", extra={"event": "converged", "phase": "1", "epoch": epoch})
            break
    history.converged.setdefault("1", False)
    phases = tuple(phase for phase in model.phases if phase != "1") + ("1",)
    return SocialPhysicsModel(model.params, model.settings, phases), history


def train_phase2(windows: Sequence[Window], model: SocialPhysicsModel, config: TrainConfig,
                 history: Optional[TrainingHistory] = None) -> Tuple[SocialPhysicsModel, TrainingHistory]:
    """
    Fits the residual CVAE on one-step residuals of the frozen force model.

    Raises:
        CrowdForecastContractError: if the model has not completed phase 1.
        CrowdForecastTrainingAborted: on a non-finite loss or gradient.
    """
    values = config.config
    history = history or TrainingHistory()
    if "1" not in model.phases:
        raise CrowdForecastContractError("Phase 2 needs a model that completed phase 1")
    if not windows:
        raise CrowdForecastContractError("Phase 2 needs at least one training window")
    seed = values["seed"]
    if values["train_fraction"] < 1:
        windows = subsample_windows(windows, values["train_fraction"], stream(seed, SUBSAMPLE_STREAM))
    rows = residual_rows(model, windows, model.params.cvae.history_length)
    adam = AdamState(lr=values["lr_cvae"])
    rows_per_batch = values["batch_size"] * max(1, windows[0].horizon)
    epochs = range(values["epochs_phase2"])
    if values["progress"]:
        epochs = tqdm(epochs, desc="phase 2", unit="epoch")
    for epoch in epochs:
        totals = []
        for batch_index, batch in enumerate(_batches(len(rows.residuals), rows_per_batch,
                                                     stream(seed, PHASE2_STREAM, epoch))):
            try:
                loss, grads = l_cvae_and_gradients(model.params.cvae, rows.residuals[batch], rows.conditions[batch],
                                                   values["kl_weight"], stream(seed, PHASE2_STREAM, epoch, batch_index),
                                                   model.settings.feature_scale)
                if not math.isfinite(loss.total):
                    raise CrowdForecastNumericError("Non-finite loss", {"loss": loss.total})
                updated = adam_update(adam, model.params.parameters(), grads)
            except CrowdForecastNumericError as exc:
                raise _abort(f"Phase 2 aborted at epoch {epoch}: {exc}", model, history,
                             {"epoch": epoch, "batch": batch_index, **exc.diagnostics}) from exc
            model = model.with_params(model.params.assign(_group(updated, ("cvae",))))
            totals.append(loss.total)
        epoch_loss = float(np.mean(totals))
        history.phase2.append(epoch_loss)
        logger.info("Phase 2 epoch", extra={"event": "epoch_done", "phase": "2", "epoch": epoch, "loss": epoch_loss})
        if has_converged(history.phase2, values["convergence_tolerance"], values["convergence_patience"]):
            history.converged["2"] = True
            logger.info("Phase 2 converged", extra={"event": "converged", "phase": "2", "epoch": epoch})
            break
    history.converged.setdefault("2", False)
    phases = tuple(phase for phase in model.phases if phase != "2") + ("2",)
    return SocialPhysicsModel(model.params, model.settings, phases), history


def train(windows: Sequence[Window], config: TrainConfig, phase: str = "all",
          model: Optional[SocialPhysicsModel] = None) -> Tuple[SocialPhysicsModel, TrainingHistory]:
    """Runs phase "1", "2" or "all"; phase 2 runs only when epistemic uncertainty is enabled."""
    phase = TrainingPhase.parse(phase)
    history = TrainingHistory()
    if phase in (TrainingPhase.ALEATORIC, TrainingPhase.ALL):
        model = model or initial_model(config)
        model, history = train_phase1(windows, model, config, history)
    if phase in (TrainingPhase.EPISTEMIC, TrainingPhase.ALL) and config.config["epistemic"]:
        if model is None:
            raise CrowdForecastContractError("Phase 2 needs a phase-1 checkpoint (pass --resume)")
        model, history = train_phase2(windows, model, config, history)
    return model, history


def _encode_array(array: np.ndarray) -> Dict:
    return {"shape": list(array.shape), "data": [float(value) for value in np.ravel(array)]}


def save_checkpoint(model: SocialPhysicsModel, config: TrainConfig, path: PathLike,
                    history: Optional[TrainingHistory] = None) -> None:
    """
    Writes parameters, config and completed phases as JSON (temp file, then rename).

    Floats are written with their shortest round-trip representation, so a
    reload is bit-identical.
    """
    if model.params is None:
        raise CrowdForecastContractError("Only models with parameters can be checkpointed")
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.params.architecture.name,
        "phases": list(model.phases),
        "config": config.to_dict(),
        "overrides": {kind.value: [override.mean, override.std]
                      for kind, override in model.settings.overrides.items()},
        "params": {key: _encode_array(value) for key, value in sorted(model.params.parameters().items())},
        "history": history.to_dict() if history else None,
    }
    write_text_atomic(path, json.dumps(payload))
    logger.info("Checkpoint written", extra={"event": "checkpoint_written", "path": str(path)})


def load_checkpoint(path: PathLike) -> Tuple[SocialPhysicsModel, TrainConfig]:
    """
    Reads a checkpoint written by save_checkpoint.

    Raises:
        CrowdForecastParseError: if the file is not valid JSON.
        CrowdForecastCheckpointError: on another format version or missing/mis-shaped parameters.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise CrowdForecastParseError(f"Corrupt checkpoint: {exc.msg}", exc.lineno, str(path)) from exc
    if not isinstance(payload, dict):
        raise CrowdForecastCheckpointError("Checkpoint is not a JSON object")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CrowdForecastCheckpointError(
            f"Checkpoint format_version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            format_version=version)
    try:
        config = TrainConfig.from_dict(payload["config"])
        architecture = Architecture.named(payload["architecture"])
        template = ModelParams.initialize(np.random.default_rng(0), architecture)
        expected = template.parameters()
        stored = payload["params"]
        missing = sorted(set(expected) - set(stored))
        if missing:
            raise CrowdForecastCheckpointError(f"Checkpoint is missing parameters: {missing[:5]}", version)
        arrays = {key: np.array(stored[key]["data"], dtype=np.float64).reshape(stored[key]["shape"])
                  for key in expected}
        params = template.assign(arrays)
        overrides = {FactorKind.parse(kind): CoefficientOverride(*values)
                     for kind, values in (payload.get("overrides") or {}).items()}
        phases = tuple(str(phase) for phase in payload.get("phases", []))
    except CrowdForecastCheckpointError:
        raise
    except (CrowdForecastConfigError, CrowdForecastShapeError, KeyError, TypeError, ValueError) as exc:
        raise CrowdForecastCheckpointError(f"Invalid checkpoint: {exc}", version) from exc
    model = SocialPhysicsModel(params, ModelSettings.from_config(config, overrides), phases)
    logger.info("Checkpoint loaded", extra={"event": "checkpoint_loaded", "path": str(path), "phases": list(phases)})
    return model, config
