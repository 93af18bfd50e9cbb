"""
Configuration objects for training and simulation.

Both classes keep a class-level `default_config` and store only the keys a user
changed; `config` returns the merged view.
"""

import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .constants import (
    COLLISION_RADIUS,
    FEATURE_SCALE,
    NEIGHBOR_RADIUS,
    PIXEL_DISC_RADIUS,
    SECONDS_PER_FRAME,
    SIGMA_LATENT,
)
from .exceptions import CrowdForecastConfigError, CrowdForecastParseError
from .types import FactorKind, PriorSpec

ConfigValue = Union[float, bool, List, str, int, None]

PHASE1_LR_RANGE = (3e-6, 3e-5)
PHASE2_LR_RANGE = (1e-7, 1e-6)


class _Config:

    default_config: Dict[str, ConfigValue] = {}

    def __init__(self, config: Optional[Dict[str, ConfigValue]] = None, **kwargs) -> None:
        self.__config: Dict[str, ConfigValue] = {}
        merged = dict(config or {})
        merged.update(kwargs)
        if merged:
            self._validate_and_set_config(merged)

    def __getattr__(self, name: str):
        if name.startswith("_") or name not in type(self).default_config:
            raise AttributeError(name)
        return self.config[name]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.__config!r})"

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.config == other.config

    @property
    def config(self) -> Dict[str, ConfigValue]:
        """
        Retrieves the current configuration.

        Returns:
            Dict[str, ConfigValue]: the default configuration updated with every
            value the user changed.
        """
        return {**type(self).default_config, **self.__config}

    @config.setter
    def config(self, value) -> None:
        self.set_config(**value)

    def set_config(self, **kwargs) -> None:
        """
        Sets configuration parameters.

        Parameters:
            **kwargs: configuration keys and their new values.

        Raises:
            CrowdForecastConfigError: on an unknown key, a value of the wrong type,
            or a value outside its documented range.
        """
        self._validate_and_set_config(kwargs)

    def reset_config(self) -> None:
        """Resets the configuration to its default values."""
        self.__config = {}

    def to_dict(self) -> Dict[str, ConfigValue]:
        return {key: _plain(value) for key, value in self.config.items()}

    @classmethod
    def from_dict(cls, values: Dict[str, ConfigValue]):
        return cls({key: _restore(cls.default_config.get(key), value) for key, value in values.items()})

    @classmethod
    def from_file(cls, path: Union[str, Path]):
        """
        Reads a line-oriented `key = value` configuration file.

        Blank lines and lines starting with `#` are ignored. Values are parsed
        according to the type of the key's default.

        Parameters:
            path: the configuration file.

        Returns:
            A configuration holding the file's values.

        Raises:
            CrowdForecastParseError: if a line has no `=`.
            CrowdForecastConfigError: if a key is unknown or a value cannot be parsed.
        """
        values: Dict[str, ConfigValue] = {}
        with open(path, encoding="utf-8") as handle:
            for line_number, raw in enumerate(handle, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise CrowdForecastParseError(
                        f"Expected 'key = value', got {line!r}", line_number, str(path))
                key, _, text = (part.strip() for part in line.partition("="))
                if key not in cls.default_config:
                    raise CrowdForecastConfigError(
                        f"Invalid configuration key: {key} (line {line_number})")
                values[key] = _parse_value(key, cls.default_config[key], text)
        return cls(values)

    @classmethod
    def is_config_valid(cls, config: Dict[str, ConfigValue]) -> bool:
        """
        Checks if the provided configuration is valid.

        Returns:
            bool: True if the configuration is valid, False otherwise.
        """
        try:
            cls.validate_config(config)
            return True
        except CrowdForecastConfigError:
            return False

    @classmethod
    def validate_config(cls, config: Dict[str, ConfigValue]) -> None:
        """
        Validates a configuration dictionary against the default configuration.

        Raises:
            TypeError: if config is not a dictionary.
            CrowdForecastConfigError: if a key is invalid or a value's type does not
            match the default's type.
        """
        if not isinstance(config, dict):
            raise TypeError("The configuration must be a dictionary")

        for key, value in config.items():
            if key not in cls.default_config:
                raise CrowdForecastConfigError(
                    f"Invalid configuration key: {key}")
            if not _matches_type(cls.default_config[key], value):
                raise CrowdForecastConfigError(
                    f"Invalid configuration value for key: {key}"
                )

    def _validate_and_set_config(self, config: Dict[str, ConfigValue]) -> None:
        type(self).validate_config(config)
        candidate = {**self.__config}
        for key, value in config.items():
            if value != type(self).default_config.get(key):
                candidate[key] = value
            else:
                candidate.pop(key, None)
        self._check_ranges({**type(self).default_config, **candidate})
        self.__config = candidate

    def _check_ranges(self, merged: Dict[str, ConfigValue]) -> None:
        pass


class TrainConfig(_Config):
    """Hyperparameters of both training phases and of the model they train."""

    default_config: Dict[str, ConfigValue] = {
        "lr_goal": 1e-5,
        "lr_interaction": 1e-5,
        "lr_cvae": 5e-7,
        "allow_lr_override": False,
        "epochs_phase1": 100,
        "epochs_phase2": 100,
        "batch_size": 32,
        "seed": 0,
        "prior_goal_mu": 0.0,
        "prior_goal_sigma": 1.0,
        "prior_collision_mu": 0.0,
        "prior_collision_sigma": 1.0,
        "prior_environment_mu": 0.0,
        "prior_environment_sigma": 1.0,
        "kl_weight": 1.0,
        "mc_samples": 1,
        "r_col": COLLISION_RADIUS,
        "neighbor_radius": NEIGHBOR_RADIUS,
        "fov_deg": None,
        "feature_scale": FEATURE_SCALE,
        "dt": SECONDS_PER_FRAME,
        "sigma_latent": SIGMA_LATENT,
        "use_goal": True,
        "use_collision": True,
        "use_environment": True,
        "aleatoric": True,
        "epistemic": True,
        "architecture": "full",
        "convergence_tolerance": 1e-4,
        "convergence_patience": 5,
        "train_fraction": 1.0,
        "stride": 1,
        "progress": False,
    }

    def _check_ranges(self, merged: Dict[str, ConfigValue]) -> None:
        if not merged["allow_lr_override"]:
            for key, (low, high) in (("lr_goal", PHASE1_LR_RANGE),
                                     ("lr_interaction", PHASE1_LR_RANGE),
                                     ("lr_cvae", PHASE2_LR_RANGE)):
                if not low <= merged[key] <= high:
                    raise CrowdForecastConfigError(
                        f"{key} = {merged[key]} is outside [{low}, {high}]; "
                        f"set allow_lr_override = true to use it")
        for key in ("epochs_phase1", "epochs_phase2", "batch_size", "mc_samples", "stride"):
            if merged[key] < 1 and not (key.startswith("epochs") and merged[key] == 0):
                raise CrowdForecastConfigError(f"{key} must be >= 1, got {merged[key]}")
        for key in ("prior_goal_sigma", "prior_collision_sigma", "prior_environment_sigma",
                    "r_col", "dt", "feature_scale"):
            if not merged[key] > 0:
                raise CrowdForecastConfigError(f"{key} must be positive, got {merged[key]}")
        if not 0 < merged["train_fraction"] <= 1:
            raise CrowdForecastConfigError(
                f"train_fraction must be in (0, 1], got {merged['train_fraction']}")
        if merged["architecture"] not in ("full", "compact"):
            raise CrowdForecastConfigError(
                f"Invalid architecture: {merged['architecture']}. Valid options are: ['full', 'compact']")

    def priors(self) -> Dict[FactorKind, PriorSpec]:
        config = self.config
        return {kind: PriorSpec(config[f"prior_{kind.value}_mu"], config[f"prior_{kind.value}_sigma"])
                for kind in FactorKind}


class SimConfig(_Config):
    """Settings of a high-density simulation run."""

    default_config: Dict[str, ConfigValue] = {
        "bounds": None,
        "hnp": 50,
        "spawn_batch": None,
        "spawn_interval": 1.0,
        "duration": 30.0,
        "collision_radius": PIXEL_DISC_RADIUS,
        "intervals": [[0.0, 8.0], [4.0, 12.0], [8.0, 16.0]],
        "desired_speed": 40.0,
        "spawn_attempts": 100,
        "goal_rule": "opposite",
    }

    def _check_ranges(self, merged: Dict[str, ConfigValue]) -> None:
        if merged["hnp"] < 1:
            raise CrowdForecastConfigError(f"hnp must be >= 1, got {merged['hnp']}")
        if not merged["collision_radius"] > 0:
            raise CrowdForecastConfigError(
                f"collision_radius must be positive, got {merged['collision_radius']}")
        if not merged["duration"] > 0 or not merged["spawn_interval"] > 0:
            raise CrowdForecastConfigError("duration and spawn_interval must be positive")
        for interval in merged["intervals"]:
            if (not isinstance(interval, (list, tuple)) or len(interval) != 2
                    or not all(isinstance(bound, (int, float)) and not isinstance(bound, bool) for bound in interval)):
                raise CrowdForecastConfigError(f"Interval must hold two numbers: start, end, got {interval!r}")
            start, end = interval
            if not 0 <= start <= end <= merged["duration"]:
                raise CrowdForecastConfigError(
                    f"Interval ({start}, {end}) is not within [0, {merged['duration']}]")
        if merged["goal_rule"] not in ("opposite", "same_edge"):
            raise CrowdForecastConfigError(
                f"Invalid goal_rule: {merged['goal_rule']}. Valid options are: ['opposite', 'same_edge']")
        if merged["bounds"] is not None and len(merged["bounds"]) != 4:
            raise CrowdForecastConfigError("bounds must hold four numbers: x_min, y_min, x_max, y_max")

    @property
    def batch(self) -> int:
        spawn_batch = self.config["spawn_batch"]
        return int(spawn_batch) if spawn_batch is not None else math.ceil(self.config["hnp"] / 10)

    def interval_pairs(self) -> List[Tuple[float, float]]:
        return [(float(start), float(end)) for start, end in self.config["intervals"]]


def _matches_type(default: ConfigValue, value: ConfigValue) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def _parse_value(key: str, default: ConfigValue, text: str) -> ConfigValue:
    try:
        if text.lower() == "none":
            return None
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return lowered in ("true", "yes", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None and key != "bounds":
            return float(text)
        if isinstance(default, list) and default and isinstance(default[0], list):
            pairs = [pair.split(":") for pair in text.split(",")]
            if any(len(pair) != 2 for pair in pairs):
                raise ValueError(text)
            return [[float(bound) for bound in pair] for pair in pairs]
        if isinstance(default, list) or key == "bounds":
            return [float(item) for item in text.replace(",", " ").split()]
        return text.strip("\"'")
    except ValueError as exc:
        raise CrowdForecastConfigError(
            f"Invalid configuration value for key: {key} ({text!r})") from exc


def _plain(value: ConfigValue) -> ConfigValue:
    if isinstance(value, tuple):
        return [_plain(item) for item in value]
    if isinstance(value, list):
        return [_plain(item) for item in value]
    return value


def _restore(default: ConfigValue, value: ConfigValue) -> ConfigValue:
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value
