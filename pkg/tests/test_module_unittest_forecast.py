import os
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from crowd_forecast.data import scene_from_tracks, window_scene
from crowd_forecast.exceptions import (
    CrowdForecastContractError,
    CrowdForecastLookupError,
    CrowdForecastParseError,
    CrowdForecastShapeError,
    CrowdForecastUsageError,
)
from crowd_forecast.forecast import (
    EndpointGaussian,
    ade,
    best_of,
    decompose_uncertainty,
    density_grid,
    evaluate_predictions,
    explain,
    fde,
    fit_endpoint_gaussian,
    goal_mode,
    predict_constant_velocity,
    predict_deterministic,
    predict_standard,
    predict_ultra,
    prediction_collisions,
    read_goals,
    read_predictions,
    write_goals,
    write_predictions,
)
from crowd_forecast.types import FactorKind, PredictionSet
from tests.helpers import DT, compact_model, goal_only_model, linear_scene, toy_window


class TestMetrics(unittest.TestCase):
    """測試位移誤差指標"""

    def setUp(self):
        self.truth = np.cumsum(np.ones((12, 2)), axis=0)

    def test_identity(self):
        """測試相同軌跡誤差為零"""
        self.assertEqual(ade(self.truth, self.truth), 0.0)
        self.assertEqual(fde(self.truth, self.truth), 0.0)

    def test_constant_offset(self):
        """測試固定偏移"""
        shifted = self.truth + np.array([1.0, 0.0])
        self.assertAlmostEqual(ade(shifted, self.truth), 1.0)
        self.assertAlmostEqual(fde(shifted, self.truth), 1.0)

    def test_final_offset(self):
        """測試只有最後一點偏移"""
        shifted = self.truth.copy()
        shifted[-1] += np.array([3.0, 4.0])
        self.assertAlmostEqual(ade(shifted, self.truth), 5.0 / 12.0)
        self.assertAlmostEqual(fde(shifted, self.truth), 5.0)

    def test_length_mismatch(self):
        """測試長度不符"""
        with self.assertRaises(CrowdForecastShapeError):
            ade(self.truth[:11], self.truth)

    def test_best_of(self):
        """測試最佳樣本分別取最小值"""
        close_end = self.truth.copy()
        close_end[:-1] += 10.0
        close_path = self.truth + np.array([0.0, 2.0])
        best_ade, best_fde = best_of([close_end, close_path], self.truth)
        self.assertAlmostEqual(best_ade, 2.0)
        self.assertAlmostEqual(best_fde, 0.0)
        self.assertEqual(best_of([close_path, self.truth], self.truth), (0.0, 0.0))
        with self.assertRaises(CrowdForecastContractError):
            best_of([], self.truth)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-500, 500), st.floats(-500, 500))
    def test_translation_invariance(self, dx, dy):
        """測試平移不變性"""
        prediction = self.truth + np.array([0.5, -2.0]) * np.arange(12)[:, None]
        shift = np.array([dx, dy])
        self.assertAlmostEqual(ade(prediction + shift, self.truth + shift), ade(prediction, self.truth), places=6)
        self.assertAlmostEqual(fde(prediction + shift, self.truth + shift), fde(prediction, self.truth), places=6)


class TestPrediction(unittest.TestCase):
    """測試預測流程"""

    @classmethod
    def setUpClass(cls):
        cls.window = toy_window()
        cls.model = compact_model(0)

    def test_sample_count_and_shape(self):
        """測試樣本數與形狀"""
        result = predict_standard(self.model, self.window, self.window.destination, samples=5,
                                  rng=np.random.default_rng(1))
        self.assertEqual(result.samples.shape, (5, 12, 2))
        self.assertEqual(result.window_id, self.window.window_id)
        self.assertEqual(len(result.factor_records), 12)

    def test_seeded_determinism(self):
        """測試相同種子預測一致"""
        first = predict_standard(self.model, self.window, self.window.destination, 4, np.random.default_rng(9))
        second = predict_standard(self.model, self.window, self.window.destination, 4, np.random.default_rng(9))
        np.testing.assert_array_equal(first.samples, second.samples)

    def test_zero_spread_is_mean_rollout(self):
        """測試無隨機性時等於平均推演"""
        model = goal_only_model(2.0)
        standard = predict_standard(model, self.window, self.window.destination, 1, np.random.default_rng(3))
        deterministic = predict_deterministic(model, self.window, self.window.destination)
        np.testing.assert_allclose(standard.samples, deterministic.samples)

    def test_reaches_goal(self):
        """測試目標係數 1/dt 時最後一點等於目標"""
        goal = np.array([150.0, -40.0])
        result = predict_standard(goal_only_model(1.0 / DT), self.window, goal, 3, np.random.default_rng(0))
        for sample in result.samples:
            np.testing.assert_allclose(sample[-1], goal, atol=1e-6)

    def test_residuals_need_phase2(self):
        """測試未完成第二階段時不可取樣殘差"""
        with self.assertRaises(CrowdForecastUsageError):
            predict_standard(self.model, self.window, self.window.destination, 1, np.random.default_rng(0),
                             epistemic=True)

    def test_invalid_goal_shape(self):
        """測試目標形狀錯誤"""
        with self.assertRaises(CrowdForecastShapeError):
            predict_standard(self.model, self.window, np.zeros((3, 2)), samples=2)

    def test_constant_velocity(self):
        """測試等速外插"""
        prediction = predict_constant_velocity(self.window)
        np.testing.assert_allclose(prediction, self.window.future)


class TestUltraSampling(unittest.TestCase):
    """測試逐步挑選最接近真值的取樣"""

    @classmethod
    def setUpClass(cls):
        cls.window = toy_window()
        cls.model = compact_model(0)

    def test_single_candidate_equals_standard(self):
        """測試只取一個候選時等於標準取樣"""
        goals = np.repeat(self.window.destination[None], 3, axis=0)
        ultra = predict_ultra(self.model, self.window, self.window.future, goals, positions=1,
                              rng=np.random.default_rng(5))
        standard = predict_standard(self.model, self.window, goals, 3, np.random.default_rng(5))
        np.testing.assert_array_equal(ultra.samples, standard.samples)

    def test_no_spread_equals_mean_rollout(self):
        """測試無隨機性時與候選數無關"""
        model = goal_only_model(2.0)
        deterministic = predict_deterministic(model, self.window, self.window.destination)
        for positions in (1, 5, 15):
            ultra = predict_ultra(model, self.window, self.window.future, self.window.destination[None],
                                  positions=positions, rng=np.random.default_rng(positions))
            np.testing.assert_allclose(ultra.samples, deterministic.samples)

    def test_more_candidates_do_not_hurt(self):
        """測試候選數增加時平均誤差不增加"""
        errors = {1: [], 15: []}
        for seed in range(10):
            for positions in errors:
                ultra = predict_ultra(self.model, self.window, self.window.future,
                                      self.window.destination[None], positions, np.random.default_rng(seed))
                errors[positions].append(ade(ultra.samples[0], self.window.future))
        self.assertLessEqual(np.mean(errors[15]), np.mean(errors[1]))

    def test_missing_ground_truth(self):
        """測試缺少真值"""
        with self.assertRaises(CrowdForecastContractError):
            predict_ultra(self.model, self.window, None, self.window.destination[None])
        with self.assertRaises(CrowdForecastContractError):
            predict_ultra(self.model, self.window, self.window.future[:5], self.window.destination[None])


class TestGoals(unittest.TestCase):
    """測試目標模式"""

    def setUp(self):
        self.window = toy_window()
        self.directory = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.directory.cleanup()

    def test_ground_truth(self):
        """測試真值目標"""
        np.testing.assert_array_equal(goal_mode("ground_truth", self.window), self.window.future[-1])

    def test_degenerate_endpoint_gaussian(self):
        """測試變異數為零的終點高斯"""
        windows = window_scene(linear_scene({0: ((0.0, 0.0), (10.0, 0.0)), 1: ((0.0, 50.0), (10.0, 0.0))}))
        endpoint = fit_endpoint_gaussian(windows)
        np.testing.assert_allclose(endpoint.covariance, np.zeros((2, 2)), atol=1e-18)
        goal = goal_mode("endpoint_gaussian", self.window, np.random.default_rng(0), endpoint=endpoint)
        np.testing.assert_allclose(goal, self.window.observed[-1].position + endpoint.mean)
        restored = EndpointGaussian.from_record(endpoint.to_record())
        np.testing.assert_array_equal(restored.mean, endpoint.mean)

    def test_goals_file(self):
        """測試目標檔案寫入與讀回"""
        path = os.path.join(self.directory.name, "goals.json")
        write_goals({self.window.window_id: [12.5, -3.0]}, path)
        goals = read_goals(path)
        np.testing.assert_array_equal(goal_mode("file", self.window, goals=goals), [12.5, -3.0])
        with self.assertRaises(CrowdForecastLookupError):
            goal_mode("file", self.window, goals={"other/0/0": [0.0, 0.0]})
        with self.assertRaises(CrowdForecastContractError):
            goal_mode("file", self.window)

    def test_unknown_mode(self):
        """測試未知的目標模式"""
        with self.assertRaises(ValueError):
            goal_mode("oracle", self.window)


class TestExplanations(unittest.TestCase):
    """測試力的解釋與熱度圖"""

    def test_grid_integrates_to_one(self):
        """測試熱度圖積分約為一"""
        std = np.array([2.0, 0.5])
        grid, extent = density_grid(np.array([1.0, -1.0]), std, 41, 5.0 * std)
        cell_area = (extent[1] - extent[0]) / 41 * (extent[3] - extent[2]) / 41
        self.assertAlmostEqual(float(grid.sum() * cell_area), 1.0, delta=0.02)
        self.assertTrue(np.all(grid >= 0))

    def test_peak_at_mean_cell(self):
        """測試峰值位於平均值所在格"""
        grid, _ = density_grid(np.array([3.0, 4.0]), np.array([1.0, 2.0]), 33, np.array([5.0, 10.0]))
        self.assertEqual(np.unravel_index(np.argmax(grid), grid.shape), (16, 16))

    def test_smaller_std_has_higher_peak(self):
        """測試標準差較小時峰值較高"""
        wide, _ = density_grid(np.zeros(2), np.array([2.0, 2.0]), 33, np.array([10.0, 10.0]))
        narrow, _ = density_grid(np.zeros(2), np.array([1.0, 1.0]), 33, np.array([10.0, 10.0]))
        self.assertGreater(narrow.max(), wide.max())

    def test_degenerate_std_is_one_hot(self):
        """測試標準差退化時為單點"""
        grid, _ = density_grid(np.array([0.0, 0.0]), np.array([0.0, 1.0]), 5, np.array([1.0, 1.0]))
        self.assertEqual(grid.sum(), 1.0)
        self.assertEqual(grid[2, 2], 1.0)

    def test_grid_size_must_be_odd(self):
        """測試格數必須為正奇數"""
        for grid_size in (0, 4, 32):
            with self.subTest(grid_size=grid_size):
                with self.assertRaises(CrowdForecastUsageError):
                    density_grid(np.zeros(2), np.ones(2), grid_size, np.ones(2))
        window = toy_window()
        with self.assertRaises(CrowdForecastUsageError):
            explain(compact_model(0), window, window.destination, grid_size=8)

    def test_explain_every_step(self):
        """測試每一步每個因子都有解釋"""
        window = toy_window()
        steps = explain(compact_model(0), window, window.destination, grid_size=9)
        self.assertEqual(len(steps), window.horizon)
        kinds = [explanation.kind for explanation in steps[0]]
        self.assertEqual(kinds, [FactorKind.GOAL, FactorKind.COLLISION, FactorKind.ENVIRONMENT])
        for explanation in steps[0]:
            self.assertEqual(explanation.grid.shape, (9, 9))
            self.assertEqual(explanation.std.shape, (2,))
            self.assertEqual(len(explanation.to_record()["std"]), 2)

    def test_explain_reports_base_times_std(self):
        """測試各軸標準差為基底乘以係數標準差"""
        window = toy_window(neighbors=False, obstacles=False)
        goal = window.destination + np.array([30.0, 50.0])
        steps = explain(goal_only_model(1.0 / DT, std=0.5), window, goal)
        explanation = steps[0][0]
        np.testing.assert_allclose(explanation.std, np.abs(explanation.mean) * 0.5 * DT)


class TestEvaluation(unittest.TestCase):
    """測試預測評估"""

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.directory.cleanup()

    def test_truth_scores_zero(self):
        """測試以真值當預測時誤差為零"""
        windows = window_scene(linear_scene({0: ((0.0, 0.0), (10.0, 0.0))}, frames=22))
        records = [PredictionSet(window.window_id, "ground_truth", window.future[None]) for window in windows]
        self.assertEqual(evaluate_predictions(records, windows), {"ade": 0.0, "fde": 0.0, "windows": 3})
        with self.assertRaises(CrowdForecastLookupError):
            evaluate_predictions([PredictionSet("nope/0/0", "ground_truth", windows[0].future[None])], windows)

    def test_world_coordinates(self):
        """測試以單應矩陣換算成世界座標"""
        window = window_scene(linear_scene({0: ((0.0, 0.0), (10.0, 0.0))}))[0]
        record = PredictionSet(window.window_id, "ground_truth", (window.future + np.array([4.0, 0.0]))[None])
        scores = evaluate_predictions([record], [window], homography=np.diag([2.0, 2.0, 1.0]))
        self.assertAlmostEqual(scores["ade"], 2.0)

    def test_prediction_collisions(self):
        """測試同時預測的視窗之間的碰撞"""
        scene = linear_scene({0: ((0.0, 0.0), (30.0, 0.0)), 1: ((200.0, 3.0), (-30.0, 0.0))})
        windows = window_scene(scene)
        records = [PredictionSet(window.window_id, "ground_truth", window.future[None]) for window in windows]
        report = prediction_collisions(records, windows, radius=7.5)
        self.assertEqual(len(report.intervals), 1)
        interval = report.intervals[0]
        self.assertAlmostEqual(interval.t_start, 8 * DT)
        self.assertAlmostEqual(interval.t_end, 19 * DT)
        self.assertEqual((interval.agents, interval.collisions), (2, 1))
        self.assertEqual(interval.rate, 1.0)

    def test_prediction_collision_times_follow_frame_step(self):
        """測試碰撞區間以秒為單位並依影格間距換算"""
        tracks = {agent_id: {100 + 10 * index: np.array([start + 4.0 * index, 0.0]) for index in range(20)}
                  for agent_id, start in ((0, 0.0), (1, 300.0))}
        windows = window_scene(scene_from_tracks(tracks, dt=DT))
        records = [PredictionSet(window.window_id, "ground_truth", window.future[None]) for window in windows]
        interval = prediction_collisions(records, windows, radius=7.5).intervals[0]
        self.assertAlmostEqual(interval.t_start, 8 * DT)
        self.assertAlmostEqual(interval.t_end, 19 * DT)
        self.assertEqual((interval.agents, interval.collisions), (2, 0))

    def test_prediction_file_round_trip(self):
        """測試預測檔寫入與讀回"""
        path = os.path.join(self.directory.name, "predictions.jsonl")
        record = PredictionSet("toy/0/0", "ground_truth", np.arange(24.0).reshape(1, 12, 2))
        write_predictions([record, record], path)
        loaded = read_predictions(path)
        self.assertEqual(len(loaded), 2)
        np.testing.assert_array_equal(loaded[1].samples, record.samples)

    def test_corrupt_prediction_file(self):
        """測試損毀的預測檔回報行號"""
        path = os.path.join(self.directory.name, "broken.jsonl")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write('{"window_id": "a", "goal_mode": "ground_truth", "samples": []}\n{broken\n')
        with self.assertRaises(CrowdForecastParseError) as context:
            read_predictions(path)
        self.assertEqual(context.exception.line_number, 2)


class TestUncertaintyDecomposition(unittest.TestCase):
    """測試不確定性分解"""

    def test_aleatoric_part_matches_standard(self):
        """測試只含隨機性的部分等於關閉殘差的預測"""
        window = toy_window()
        model = compact_model(0, phases=("1", "2"))
        seed = int(np.random.default_rng(5).integers(0, 2 ** 63 - 1))
        aleatoric, combined = decompose_uncertainty(model, window, window.destination, 3, np.random.default_rng(5))
        expected = predict_standard(model, window, window.destination, 3, np.random.default_rng(seed),
                                    epistemic=False)
        np.testing.assert_array_equal(aleatoric.samples, expected.samples)
        self.assertEqual(combined.samples.shape, (3, 12, 2))
        self.assertFalse(np.array_equal(aleatoric.samples, combined.samples))


if __name__ == '__main__':
    unittest.main()
