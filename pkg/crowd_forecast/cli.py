"""
Command-line entry point: ingest, train, predict, evaluate, simulate, explain, replay.

Every command writes its outputs atomically plus `<out>.manifest.json`, a
record of the argv, seed, configuration and input digests that `replay`
re-runs.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from .config import SimConfig, TrainConfig
from .data import iter_windows, load_scene_any, save_scene, window_scene, write_text_atomic, write_trajectories
from .exceptions import (
    CrowdForecastCheckpointError,
    CrowdForecastConfigError,
    CrowdForecastContractError,
    CrowdForecastError,
    CrowdForecastLookupError,
    CrowdForecastNumericError,
    CrowdForecastParseError,
    CrowdForecastProjectiveError,
    CrowdForecastShapeError,
    CrowdForecastUsageError,
    CrowdForecastValidationError,
)
from .forecast import (
    evaluate_predictions,
    explain,
    fit_endpoint_gaussian,
    goal_mode,
    predict_deterministic,
    predict_standard,
    predict_ultra,
    prediction_collisions,
    read_goals,
    read_predictions,
    sample_goals,
    write_predictions,
)
from .simulator import SyntheticTemplate, collision_stats, simulate, synthetic_model
from .training import load_checkpoint, save_checkpoint, stream, train
from .types import CoefficientOverride, FactorKind, GoalMode, PredictionMode, RunManifest, TrainingPhase, Window

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4

PREDICT_STREAM = 10
LOG_LEVEL_ENV = "CROWD_FORECAST_LOG_LEVEL"

_EXIT_CODES = (
    (CrowdForecastNumericError, EXIT_NUMERIC),
    ((CrowdForecastUsageError, CrowdForecastConfigError, CrowdForecastLookupError), EXIT_USAGE),
    ((CrowdForecastValidationError, CrowdForecastParseError, CrowdForecastContractError,
      CrowdForecastCheckpointError, CrowdForecastShapeError, CrowdForecastProjectiveError), EXIT_VALIDATION),
)


class _StructuredFormatter(logging.Formatter):
    """Appends the `extra` fields of a record as key=value pairs."""

    _standard = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        fields = {key: value for key, value in vars(record).items() if key not in self._standard}
        if fields:
            line += " " + " ".join(f"{key}={value}" for key, value in fields.items())
        return line


def configure_logging(level: Optional[str]) -> None:
    level = (level or os.getenv(LOG_LEVEL_ENV) or "WARNING").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_StructuredFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def digest(path: str) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def _inputs(args: argparse.Namespace) -> List[str]:
    paths = []
    for key in ("input", "homography", "obstacles", "config", "resume", "model", "scene", "pred",
                "goals_file", "manifest"):
        value = getattr(args, key, None)
        if value:
            paths.append(value)
    for key in ("scenes", "endpoint_scenes"):
        paths.extend(getattr(args, key, None) or [])
    return paths


def _require_files(paths: Sequence[str]) -> None:
    for path in paths:
        if not Path(path).is_file():
            raise CrowdForecastUsageError(f"Input file not found: {path}")


def _write_json(path: str, payload: Dict) -> None:
    write_text_atomic(path, json.dumps(payload, indent=2))


def _load_scenes(paths: Sequence[str], dt: Optional[float] = None) -> list:
    kwargs = {} if dt is None else {"dt": dt}
    return [load_scene_any(path, **kwargs) for path in paths]


def _windows(model, scene, stride: int = 1) -> List[Window]:
    return window_scene(scene, stride=stride, radius=model.settings.neighbor_radius, fov_deg=model.settings.fov_deg)


def _map(function: Callable, items: Sequence, threads: int) -> list:
    """Applies `function` to every item; results keep the input order."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(function, items))
    return [function(item) for item in items]


def cmd_ingest(args: argparse.Namespace) -> Dict:
    scene = load_scene_any(args.input, homography_path=args.homography, dt=args.dt,
                           obstacles_path=args.obstacles, input_space=args.input_space, name=args.name)
    save_scene(scene, args.out)
    logger.info("Scene ingested", extra={"event": "ingested", "agents": len(scene.agent_ids()),
                                         "frames": len(scene.frame_ids)})
    return {"artifacts": [args.out], "config": {"dt": args.dt, "input_space": args.input_space}}


def cmd_train(args: argparse.Namespace) -> Dict:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    config.set_config(seed=args.seed)
    if args.progress:
        config.set_config(progress=True)
    model = None
    if args.resume:
        model, _ = load_checkpoint(args.resume)
    elif TrainingPhase.parse(args.phase) is TrainingPhase.EPISTEMIC:
        raise CrowdForecastContractError("Phase 2 needs a phase-1 checkpoint (pass --resume)")
    values = config.config
    scenes = _load_scenes(args.scenes, values["dt"])
    windows = iter_windows(scenes, stride=values["stride"], radius=values["neighbor_radius"], fov_deg=values["fov_deg"])
    model, history = train(windows, config, args.phase, model)
    save_checkpoint(model, config, args.out, history)
    return {"artifacts": [args.out], "config": config.to_dict()}


def _goal_inputs(args: argparse.Namespace, model):
    goals = read_goals(args.goals_file) if args.goals_file else None
    endpoint = None
    if GoalMode.parse(args.goal_mode) is GoalMode.ENDPOINT_GAUSSIAN:
        if not args.endpoint_scenes:
            raise CrowdForecastUsageError("Goal mode 'endpoint_gaussian' needs --endpoint-scenes")
        fit_windows = [window for scene in _load_scenes(args.endpoint_scenes) for window in _windows(model, scene)]
        endpoint = fit_endpoint_gaussian(fit_windows)
    return goals, endpoint


def cmd_predict(args: argparse.Namespace) -> Dict:
    model, _ = load_checkpoint(args.model)
    scene = load_scene_any(args.scene, dt=model.settings.dt)
    windows = _windows(model, scene, args.stride)
    if args.window:
        windows = [window for window in windows if window.window_id in set(args.window)]
        if not windows:
            raise CrowdForecastLookupError(f"No window matches {args.window}")
    goals, endpoint = _goal_inputs(args, model)
    mode = PredictionMode.parse(args.mode)

    def predict_one(window: Window):
        rng = stream(args.seed, PREDICT_STREAM, window.index)
        if mode is PredictionMode.DETERMINISTIC:
            return predict_deterministic(model, window, goal_mode(args.goal_mode, window, rng, goals, endpoint),
                                         args.goal_mode)
        window_goals = sample_goals(args.goal_mode, window, args.samples, rng, goals, endpoint)
        if mode is PredictionMode.ULTRA:
            return predict_ultra(model, window, window.future, window_goals, args.positions, rng,
                                 goal_mode=args.goal_mode)
        return predict_standard(model, window, window_goals, args.samples, rng, goal_mode=args.goal_mode)

    records = _map(predict_one, windows, args.threads)
    write_predictions(records, args.out)
    logger.info("Predictions written", extra={"event": "predicted", "windows": len(records), "mode": mode.value})
    return {"artifacts": [args.out], "config": {"mode": mode.value, "samples": args.samples,
                                                "goal_mode": args.goal_mode, "positions": args.positions}}


def cmd_evaluate(args: argparse.Namespace) -> Dict:
    records = read_predictions(args.pred)
    scene = load_scene_any(args.scene)
    windows = window_scene(scene)
    metrics = [name.strip() for name in args.metrics.split(",") if name.strip()]
    unknown = set(metrics) - {"ade", "fde", "collision"}
    if unknown:
        raise CrowdForecastUsageError(f"Unknown metrics: {sorted(unknown)}")
    result: Dict = {"space": "world" if args.world else "pixel"}
    if {"ade", "fde"} & set(metrics):
        scores = evaluate_predictions(records, windows, scene.homography if args.world else None)
        result.update({key: scores[key] for key in ("ade", "fde") if key in metrics})
        result["windows"] = scores["windows"]
    if "collision" in metrics:
        result["collision"] = prediction_collisions(records, windows, args.radius).to_record()
    _write_json(args.out, result)
    return {"artifacts": [args.out], "config": {"metrics": metrics, "radius": args.radius}}


def _parse_intervals(text: str) -> List[List[float]]:
    try:
        return [[float(part) for part in item.split(":")] for item in text.split(",") if item]
    except ValueError as exc:
        raise CrowdForecastUsageError(f"Invalid --intervals {text!r}; expected start:end,start:end") from exc


def _parse_coefficients(items: Sequence[str]) -> Dict[FactorKind, CoefficientOverride]:
    overrides = {}
    for item in items:
        try:
            kind, value = item.split("=", 1)
            numbers = [float(part) for part in value.split(":")]
            overrides[FactorKind.parse(kind)] = CoefficientOverride(*numbers)
        except (TypeError, ValueError) as exc:
            raise CrowdForecastUsageError(f"Invalid --coefficient {item!r}; expected kind=mean[:std]") from exc
    return overrides


def cmd_simulate(args: argparse.Namespace) -> Dict:
    sim_config = SimConfig.from_file(args.config) if args.config else SimConfig()
    updates = {key: value for key, value in (("hnp", args.hnp), ("duration", args.duration),
                                             ("collision_radius", args.radius)) if value is not None}
    if args.intervals:
        updates["intervals"] = _parse_intervals(args.intervals)
    sim_config.set_config(**updates)
    if args.model:
        model, _ = load_checkpoint(args.model)
    elif args.coefficient:
        model = synthetic_model(SyntheticTemplate(), _parse_coefficients(args.coefficient))
    else:
        raise CrowdForecastUsageError("simulate needs --model or at least one --coefficient")
    scene = load_scene_any(args.scene, dt=model.settings.dt) if args.scene else None
    simulated = simulate(model, sim_config, np.random.default_rng(args.seed), scene, args.threads)
    write_trajectories(simulated, args.out)
    report_path = f"{args.out}.collisions.json"
    report = collision_stats(simulated, sim_config.collision_radius, sim_config.interval_pairs())
    _write_json(report_path, report.to_record())
    return {"artifacts": [args.out, report_path], "config": sim_config.to_dict()}


def cmd_explain(args: argparse.Namespace) -> Dict:
    model, _ = load_checkpoint(args.model)
    scene = load_scene_any(args.scene, dt=model.settings.dt)
    matches = [window for window in _windows(model, scene) if window.window_id == args.window]
    if not matches:
        raise CrowdForecastLookupError(f"No window {args.window}")
    window = matches[0]
    steps = explain(model, window, window.destination, args.grid, args.extent)
    payload = {"window_id": window.window_id,
               "steps": [[factor.to_record() for factor in step] for step in steps]}
    _write_json(args.out, payload)
    return {"artifacts": [args.out], "config": {"grid": args.grid, "extent": args.extent}}


def cmd_replay(args: argparse.Namespace) -> Dict:
    with open(args.manifest, encoding="utf-8") as handle:
        manifest = json.load(handle)
    argv = list(manifest["argv"])
    if argv and argv[0] == "replay":
        raise CrowdForecastUsageError("A replay manifest cannot be replayed")
    code = main(argv)
    if code != 0:
        raise CrowdForecastValidationError(f"Replayed command exited with code {code}")
    return {"artifacts": list(manifest.get("artifacts", [])), "config": {"replayed": args.manifest}}


def _common(parser: argparse.ArgumentParser, seed: bool = False, threads: bool = False) -> None:
    parser.add_argument("--out", required=True, help="output path (written atomically)")
    if seed:
        parser.add_argument("--seed", type=int, required=True, help="seed of every random stream")
    if threads:
        parser.add_argument("--threads", type=int, default=1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowd-forecast", description=__doc__)
    parser.add_argument("--log-level", default=None, help=f"logging level (default: ${LOG_LEVEL_ENV} or WARNING)")
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="convert a trajectory file into a scene export")
    ingest.add_argument("--input", required=True, help="tab-separated trajectory file")
    ingest.add_argument("--homography", help="3x3 homography file (identity when omitted)")
    ingest.add_argument("--obstacles", help="static obstacle points file")
    ingest.add_argument("--dt", type=float, default=0.4, help="seconds per frame")
    ingest.add_argument("--input-space", choices=("pixel", "world"), default="pixel")
    ingest.add_argument("--name", help="scene name (default: file stem)")
    _common(ingest)
    ingest.set_defaults(handler=cmd_ingest)

    train_parser = commands.add_parser("train", help="train a model on scene files")
    train_parser.add_argument("--scenes", nargs="+", required=True, help="scene exports or trajectory files")
    train_parser.add_argument("--config", help="key = value training configuration")
    train_parser.add_argument("--phase", choices=[phase.value for phase in TrainingPhase], default="all")
    train_parser.add_argument("--resume", help="checkpoint to continue from")
    train_parser.add_argument("--progress", action="store_true", help="show a progress bar")
    _common(train_parser, seed=True)
    train_parser.set_defaults(handler=cmd_train)

    predict = commands.add_parser("predict", help="forecast every window of a scene")
    predict.add_argument("--model", required=True, help="checkpoint")
    predict.add_argument("--scene", required=True)
    predict.add_argument("--mode", choices=[mode.value for mode in PredictionMode], default="standard")
    predict.add_argument("--samples", type=int, default=20, help="trajectories per window (K)")
    predict.add_argument("--positions", type=int, default=15, help="candidates per step in ultra mode")
    predict.add_argument("--goal-mode", choices=[mode.value for mode in GoalMode], default="ground_truth")
    predict.add_argument("--goals-file", help="JSON object window_id -> [x, y]")
    predict.add_argument("--endpoint-scenes", nargs="+", help="scenes the endpoint Gaussian is fitted on")
    predict.add_argument("--stride", type=int, default=1)
    predict.add_argument("--window", action="append", help="only predict this window id (repeatable)")
    _common(predict, seed=True, threads=True)
    predict.set_defaults(handler=cmd_predict)

    evaluate = commands.add_parser("evaluate", help="score predictions against a scene")
    evaluate.add_argument("--pred", required=True, help="predictions file")
    evaluate.add_argument("--scene", required=True)
    evaluate.add_argument("--metrics", default="ade,fde", help="comma list of ade, fde, collision")
    evaluate.add_argument("--radius", type=float, default=7.5, help="collision radius")
    evaluate.add_argument("--world", action="store_true", help="report distances in world units")
    _common(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    sim = commands.add_parser("simulate", help="run a crowd simulation")
    sim.add_argument("--model", help="checkpoint")
    sim.add_argument("--coefficient", action="append", default=[],
                     help="fixed coefficient kind=mean[:std] when no model is given (repeatable)")
    sim.add_argument("--scene", help="scene providing bounds and obstacles")
    sim.add_argument("--config", help="key = value simulation configuration")
    sim.add_argument("--hnp", type=int, help="highest number of simultaneous agents")
    sim.add_argument("--duration", type=float, help="seconds")
    sim.add_argument("--intervals", help="start:end,start:end in seconds")
    sim.add_argument("--radius", type=float, help="collision radius")
    _common(sim, seed=True, threads=True)
    sim.set_defaults(handler=cmd_simulate)

    explain_parser = commands.add_parser("explain", help="per-step force explanations of one window")
    explain_parser.add_argument("--model", required=True)
    explain_parser.add_argument("--scene", required=True)
    explain_parser.add_argument("--window", required=True, help="window id")
    explain_parser.add_argument("--grid", type=int, default=33, help="grid size G (odd)")
    explain_parser.add_argument("--extent", type=float, help="grid half-width (default: 5 stds per axis)")
    _common(explain_parser)
    explain_parser.set_defaults(handler=cmd_explain)

    replay = commands.add_parser("replay", help="re-run the command recorded in a manifest")
    replay.add_argument("--manifest", required=True)
    _common(replay)
    replay.set_defaults(handler=cmd_replay)
    return parser


def _exit_code(error: CrowdForecastError) -> int:
    for types, code in _EXIT_CODES:
        if isinstance(error, types):
            return code
    return EXIT_VALIDATION


def _error_record(error: BaseException, code: int) -> str:
    record = {"error": type(error).__name__, "message": str(error), "exit_code": code}
    diagnostics = getattr(error, "diagnostics", None)
    if diagnostics:
        record["diagnostics"] = diagnostics
    return json.dumps(record, default=str)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Runs one command.

    Returns:
        int: 0 on success, 2 for usage errors, 3 for validation failures, 4 for numeric failures.
    """
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.log_level)
    started = time.perf_counter()
    started_at = datetime.now(timezone.utc).isoformat()
    try:
        inputs = _inputs(args)
        _require_files(inputs)
        outcome = args.handler(args)
    except CrowdForecastError as exc:
        code = _exit_code(exc)
        print(_error_record(exc, code), file=sys.stderr)
        return code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(_error_record(exc, EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest(
        command=args.command,
        argv=argv[argv.index(args.command):],
        config=outcome["config"],
        seed=getattr(args, "seed", None),
        input_digests={path: digest(path) for path in inputs},
        artifacts=outcome["artifacts"],
        started_at=started_at,
        wall_clock_seconds=time.perf_counter() - started,
    )
    _write_json(f"{args.out}.manifest.json", asdict(manifest))
    return 0
