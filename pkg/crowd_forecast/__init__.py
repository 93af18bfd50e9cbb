from .config import SimConfig, TrainConfig
from .data import load_trajectories, read_scene, save_scene, window_scene
from .forecast import ade, best_of, evaluate_predictions, explain, fde, predict_standard, predict_ultra
from .rollout import ModelSettings, SocialPhysicsModel, rollout
from .simulator import collision_stats, generate_synthetic, simulate
from .training import load_checkpoint, save_checkpoint, train
from .types import FactorKind, ForceMode, GoalMode, PredictionMode

__all__ = [
    'SimConfig', 'TrainConfig',
    'load_trajectories', 'read_scene', 'save_scene', 'window_scene',
    'ade', 'best_of', 'evaluate_predictions', 'explain', 'fde', 'predict_standard', 'predict_ultra',
    'ModelSettings', 'SocialPhysicsModel', 'rollout',
    'collision_stats', 'generate_synthetic', 'simulate',
    'load_checkpoint', 'save_checkpoint', 'train',
    'FactorKind', 'ForceMode', 'GoalMode', 'PredictionMode',
]
