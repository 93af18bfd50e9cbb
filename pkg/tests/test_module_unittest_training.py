import json
import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from crowd_forecast.config import TrainConfig
from crowd_forecast.data import window_scene
from crowd_forecast.exceptions import (
    CrowdForecastCheckpointError,
    CrowdForecastContractError,
    CrowdForecastParseError,
    CrowdForecastTrainingAborted,
)
from crowd_forecast.rollout import SocialPhysicsModel
from crowd_forecast.training import (
    has_converged,
    initial_model,
    load_checkpoint,
    save_checkpoint,
    train,
    train_phase2,
)
from crowd_forecast.types import CoefficientOverride, FactorKind
from tests.helpers import linear_scene


def _config(**overrides) -> TrainConfig:
    values = {"architecture": "compact", "epochs_phase1": 2, "epochs_phase2": 2, "batch_size": 4,
              "allow_lr_override": True, "lr_goal": 1e-3, "lr_interaction": 1e-3, "lr_cvae": 1e-3, "seed": 7}
    values.update(overrides)
    return TrainConfig(values)


def _windows():
    scene = linear_scene({0: ((0.0, 0.0), (10.0, 0.0)), 1: ((0.0, 40.0), (10.0, -1.0))}, frames=24,
                         obstacles=np.array([[100.0, 60.0]]))
    return window_scene(scene, stride=2)


class TestTraining(unittest.TestCase):
    """測試兩階段訓練"""

    @classmethod
    def setUpClass(cls):
        cls.windows = _windows()
        cls.config = _config()
        cls.model, cls.history = train(cls.windows, cls.config, phase="all")

    def test_history_and_phases(self):
        """測試訓練紀錄與完成的階段"""
        self.assertEqual(len(self.history.phase1), 2)
        self.assertEqual(len(self.history.phase2), 2)
        self.assertEqual(self.model.phases, ("1", "2"))
        self.assertTrue(self.model.epistemic_active)
        self.assertTrue(all(np.isfinite(self.history.phase1)))

    def test_parameters_change(self):
        """測試訓練會更新參數"""
        initial = initial_model(self.config).params.parameters()
        trained = self.model.params.parameters()
        self.assertFalse(np.array_equal(initial["gn/head/0/weights"], trained["gn/head/0/weights"]))
        self.assertFalse(np.array_equal(initial["cvae/decoder/0/weights"], trained["cvae/decoder/0/weights"]))

    def test_seeded_training_is_reproducible(self):
        """測試相同種子訓練結果一致"""
        again, history = train(self.windows, self.config, phase="all")
        self.assertEqual(history.phase1, self.history.phase1)
        for key, value in self.model.params.parameters().items():
            np.testing.assert_array_equal(again.params.parameters()[key], value)

    def test_phase1_only_freezes_cvae(self):
        """測試第一階段不更新 CVAE"""
        model, history = train(self.windows, self.config, phase="1")
        initial = initial_model(self.config).params.parameters()
        np.testing.assert_array_equal(model.params.parameters()["cvae/decoder/0/weights"],
                                      initial["cvae/decoder/0/weights"])
        self.assertEqual(history.phase2, [])
        self.assertEqual(model.phases, ("1",))

    def test_zero_epochs(self):
        """測試零個訓練週期"""
        model, history = train(self.windows, _config(epochs_phase1=0, epochs_phase2=0), phase="all")
        self.assertEqual(history.phase1, [])
        self.assertEqual(model.phases, ("1", "2"))

    def test_overridden_factor_is_not_learned(self):
        """測試覆寫的因子不參與訓練"""
        overrides = {FactorKind.ENVIRONMENT: CoefficientOverride(0.0, 0.0)}
        start = initial_model(self.config, overrides)
        model, _ = train(self.windows, _config(epochs_phase1=1), phase="1", model=start)
        np.testing.assert_array_equal(model.params.environment.mu, start.params.environment.mu)


class TestPhaseContracts(unittest.TestCase):
    """測試訓練階段的前置條件"""

    def test_phase2_needs_phase1(self):
        """測試未完成第一階段就進行第二階段"""
        config = _config()
        with self.assertRaises(CrowdForecastContractError):
            train_phase2(_windows(), initial_model(config), config)
        with self.assertRaises(CrowdForecastContractError):
            train(_windows(), config, phase="2")

    def test_empty_training_set(self):
        """測試沒有訓練視窗"""
        with self.assertRaises(CrowdForecastContractError):
            train([], _config(), phase="1")

    def test_non_finite_loss_aborts(self):
        """測試損失非有限時中止並保留參數"""
        config = _config()
        with patch("crowd_forecast.training.batch_l_bayes", return_value=(float("nan"), {})):
            with self.assertRaises(CrowdForecastTrainingAborted) as context:
                train(_windows(), config, phase="1")
        initial = initial_model(config).params.parameters()
        np.testing.assert_array_equal(context.exception.last_good["gn/head/0/weights"], initial["gn/head/0/weights"])
        self.assertEqual(context.exception.diagnostics["epoch"], 0)

    def test_convergence(self):
        """測試收斂判斷"""
        self.assertFalse(has_converged([1.0, 1.0], 1e-4, 2))
        self.assertTrue(has_converged([5.0, 1.0, 1.0, 1.0], 1e-4, 2))
        self.assertFalse(has_converged([1.0, 1.0, 0.5], 1e-4, 2))


class TestCheckpoints(unittest.TestCase):
    """測試檢查點的寫入與讀取"""

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.directory.name, "model.json")

    def tearDown(self):
        self.directory.cleanup()

    def test_round_trip_is_bit_identical(self):
        """測試讀回的參數逐位元相同"""
        config = _config(fov_deg=120.0)
        overrides = {FactorKind.GOAL: CoefficientOverride(2.5, 0.1)}
        model = initial_model(config, overrides)
        model = SocialPhysicsModel(model.params, model.settings, ("1",))
        save_checkpoint(model, config, self.path)
        loaded, loaded_config = load_checkpoint(self.path)
        self.assertEqual(loaded_config, config)
        self.assertEqual(loaded.phases, ("1",))
        self.assertEqual(loaded.settings, model.settings)
        for key, value in model.params.parameters().items():
            np.testing.assert_array_equal(loaded.params.parameters()[key], value)

    def test_unsupported_format_version(self):
        """測試不支援的格式版本"""
        config = _config()
        save_checkpoint(initial_model(config), config, self.path)
        with open(self.path, encoding="utf-8") as handle:
            payload = json.load(handle)
        payload["format_version"] = 99
        with open(self.path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle)
        with self.assertRaises(CrowdForecastCheckpointError) as context:
            load_checkpoint(self.path)
        self.assertEqual(context.exception.format_version, 99)

    def test_missing_parameters(self):
        """測試缺少參數的檢查點"""
        config = _config()
        save_checkpoint(initial_model(config), config, self.path)
        with open(self.path, encoding="utf-8") as handle:
            payload = json.load(handle)
        del payload["params"]["env/mu"]
        with open(self.path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle)
        with self.assertRaises(CrowdForecastCheckpointError):
            load_checkpoint(self.path)

    def test_corrupt_file(self):
        """測試損毀的檢查點"""
        with open(self.path, "w", encoding="utf-8") as handle:
            handle.write("{\"format_version\": 1,")
        with self.assertRaises(CrowdForecastParseError):
            load_checkpoint(self.path)


if __name__ == '__main__':
    unittest.main()
