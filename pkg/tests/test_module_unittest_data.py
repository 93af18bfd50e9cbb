import os
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from crowd_forecast.data import (
    load_trajectories,
    neighbors,
    pixel_to_world,
    read_homography,
    read_scene,
    save_scene,
    scene_from_tracks,
    split_leave_one_out,
    subsample_windows,
    window_scene,
    window_velocities,
    world_to_pixel,
    write_trajectories,
)
from crowd_forecast.exceptions import (
    CrowdForecastContractError,
    CrowdForecastLookupError,
    CrowdForecastParseError,
    CrowdForecastValidationError,
)
from tests.helpers import linear_scene, linear_tracks


def _write(directory: str, name: str, lines) -> str:
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    return path


class TestLoadTrajectories(unittest.TestCase):
    """測試軌跡檔案載入"""

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.directory.cleanup()

    def test_single_agent_frame_count(self):
        """測試單一行人 25 幀"""
        path = _write(self.directory.name, "one.txt",
                      [f"{frame}\t7\t{frame * 2.0}\t1.0" for frame in range(25)])
        scene = load_trajectories(path)
        self.assertEqual(scene.agent_ids(), [7])
        self.assertEqual(len(scene.frame_ids), 25)
        self.assertEqual(scene.name, "one")
        np.testing.assert_allclose(scene.states[3][7].velocity, [2.0 / 0.4, 0.0])

    def test_short_track_becomes_dynamic_obstacle(self):
        """測試短軌跡成為動態障礙物"""
        lines = [f"{frame}\t1\t{frame}\t0" for frame in range(20)]
        lines += [f"{frame}\t2\t50\t{frame}" for frame in range(10)]
        scene = load_trajectories(_write(self.directory.name, "mixed.txt", lines))
        self.assertEqual(scene.agent_ids(), [1])
        np.testing.assert_allclose(scene.dynamic_obstacles[4], [[50.0, 4.0]])
        self.assertNotIn(15, scene.dynamic_obstacles)

    def test_identical_agents_share_velocities(self):
        """測試位置相同的兩位行人速度相同"""
        lines = []
        for frame in range(20):
            lines.append(f"{frame}\t1\t{frame * 3}\t{frame}")
            lines.append(f"{frame}\t2\t{frame * 3}\t{frame}")
        scene = load_trajectories(_write(self.directory.name, "twins.txt", lines))
        self.assertEqual(scene.agent_ids(), [1, 2])
        for frame_id in scene.frame_ids:
            np.testing.assert_array_equal(scene.states[frame_id][1].velocity, scene.states[frame_id][2].velocity)

    def test_malformed_line_reports_line_number(self):
        """測試格式錯誤時回報行號"""
        path = _write(self.directory.name, "bad.txt", ["0\t1\t0\t0", "# comment", "1\t1\tabc\t0"])
        with self.assertRaises(CrowdForecastParseError) as context:
            load_trajectories(path)
        self.assertEqual(context.exception.line_number, 3)

    def test_fields_must_be_tab_separated(self):
        """測試欄位必須以 tab 分隔"""
        for record in ("1 1 0 0", "1\t1\t0 0", "1\t1\t\t0\t0"):
            with self.subTest(record=record):
                path = _write(self.directory.name, "spaces.txt", ["0\t1\t0\t0", record])
                with self.assertRaises(CrowdForecastParseError) as context:
                    load_trajectories(path)
                self.assertEqual(context.exception.line_number, 2)

    def test_duplicate_record(self):
        """測試重複紀錄"""
        path = _write(self.directory.name, "dup.txt", ["0\t1\t0\t0", "0\t1\t1\t1"])
        with self.assertRaises(CrowdForecastParseError):
            load_trajectories(path)

    def test_invalid_dt(self):
        """測試非正的 dt"""
        path = _write(self.directory.name, "dt.txt", ["0\t1\t0\t0"])
        with self.assertRaises(CrowdForecastValidationError):
            load_trajectories(path, dt=0.0)

    def test_singular_homography(self):
        """測試奇異單應矩陣"""
        path = _write(self.directory.name, "H.txt", ["1 0 0", "2 0 0", "0 0 1"])
        with self.assertRaises(CrowdForecastValidationError):
            read_homography(path)

    def test_world_input_is_converted(self):
        """測試世界座標輸入轉為像素"""
        homography = _write(self.directory.name, "H.txt", ["2 0 0", "0 2 0", "0 0 1"])
        lines = [f"{frame}\t1\t{frame}\t1" for frame in range(20)]
        scene = load_trajectories(_write(self.directory.name, "world.txt", lines), homography_path=homography,
                                  input_space="world")
        np.testing.assert_allclose(scene.states[5][1].position, [10.0, 2.0])

    def test_obstacles_file(self):
        """測試靜態障礙物檔案"""
        obstacles = _write(self.directory.name, "obstacles.txt", ["1 2", "3 4"])
        lines = [f"{frame}\t1\t{frame}\t1" for frame in range(20)]
        scene = load_trajectories(_write(self.directory.name, "scene.txt", lines), obstacles_path=obstacles)
        np.testing.assert_array_equal(scene.obstacles, [[1.0, 2.0], [3.0, 4.0]])


class TestHomography(unittest.TestCase):
    """測試座標轉換"""

    def test_identity(self):
        """測試單位矩陣"""
        np.testing.assert_allclose(world_to_pixel(np.eye(3), [3.0, 4.0]), [3.0, 4.0])

    def test_scaling(self):
        """測試縮放矩陣"""
        np.testing.assert_allclose(world_to_pixel(np.diag([2.0, 2.0, 1.0]), [3.0, 4.0]), [6.0, 8.0])

    def test_translation(self):
        """測試平移矩陣"""
        matrix = np.array([[1.0, 0.0, 5.0], [0.0, 1.0, -2.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(world_to_pixel(matrix, [0.0, 0.0]), [5.0, -2.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-0.5, 0.5), min_size=4, max_size=4),
           st.lists(st.floats(-20.0, 20.0), min_size=2, max_size=2),
           st.lists(st.floats(-100.0, 100.0), min_size=2, max_size=2))
    def test_round_trip(self, linear, shift, point):
        """測試往返轉換為恆等"""
        matrix = np.array([[2.0 + linear[0], linear[1], shift[0]],
                           [linear[2], 2.0 + linear[3], shift[1]],
                           [0.0, 0.0, 1.0]])
        back = world_to_pixel(matrix, pixel_to_world(matrix, np.array(point)))
        np.testing.assert_allclose(back, point, atol=1e-9)


class TestWindows(unittest.TestCase):
    """測試視窗切割與鄰居"""

    def test_window_count(self):
        """測試 25 幀產生 6 個視窗"""
        scene = linear_scene({0: ((0, 0), (1, 0))}, frames=25)
        windows = window_scene(scene)
        self.assertEqual(len(windows), 6)
        self.assertEqual(windows[0].window_id, "toy/0/0")
        self.assertEqual(len(windows[0].observed), 8)
        self.assertEqual(windows[0].horizon, 12)
        np.testing.assert_array_equal(windows[0].destination, windows[0].future[-1])

    def test_exact_length(self):
        """測試剛好 20 幀"""
        self.assertEqual(len(window_scene(linear_scene({0: ((0, 0), (1, 0))}, frames=20))), 1)

    def test_gap_splits_spans(self):
        """測試幀號中斷時只在連續區段切割"""
        track = linear_tracks({0: ((0, 0), (1, 0))}, frames=45)[0]
        track = {frame: position for frame, position in track.items() if frame != 22}
        scene = scene_from_tracks({0: track})
        windows = window_scene(scene)
        self.assertEqual(len(windows), 3 + 3)
        for window in windows:
            self.assertNotIn(22, window.frame_ids)

    def test_stride(self):
        """測試步幅"""
        scene = linear_scene({0: ((0, 0), (1, 0))}, frames=25)
        self.assertEqual(len(window_scene(scene, stride=2)), 3)
        with self.assertRaises(CrowdForecastContractError):
            window_scene(scene, stride=0)

    def test_window_velocities(self):
        """測試未來幀速度"""
        window = window_scene(linear_scene({0: ((0, 0), (10, 5))}))[0]
        np.testing.assert_allclose(window_velocities(window), np.tile([10.0, 5.0], (12, 1)))

    def test_neighbors_within_radius(self):
        """測試半徑內的鄰居"""
        scene = linear_scene({0: ((0, 0), (1, 0)), 1: ((5, 0), (1, 0))})
        self.assertEqual(neighbors(scene, 0, 0, radius=10).neighbor_ids, (1,))
        self.assertEqual(neighbors(scene, 1, 0, radius=10).neighbor_ids, (0,))
        self.assertEqual(neighbors(scene, 0, 0, radius=0).neighbor_ids, ())

    def test_neighbor_behind_outside_fov(self):
        """測試視野外的鄰居被排除"""
        scene = linear_scene({0: ((0, 0), (1, 0)), 1: ((-5, 0), (1, 0))})
        self.assertEqual(neighbors(scene, 0, 0, radius=10, fov_deg=180).neighbor_ids, ())
        self.assertEqual(neighbors(scene, 1, 0, radius=10, fov_deg=180).neighbor_ids, (0,))

    def test_missing_agent(self):
        """測試不存在的行人"""
        scene = linear_scene({0: ((0, 0), (1, 0))})
        with self.assertRaises(CrowdForecastLookupError):
            neighbors(scene, 9, 0)

    def test_neighbor_context_attached(self):
        """測試視窗附帶鄰居狀態"""
        scene = linear_scene({0: ((0, 0), (1, 0)), 1: ((0, 20), (1, 0))})
        window = window_scene(scene, radius=50)[0]
        self.assertEqual(window.neighbor_ids[0], (1,))
        np.testing.assert_allclose(window.neighbor_matrix(0), [[0.0, 20.0, 1.0, 0.0]])


class TestSceneFiles(unittest.TestCase):
    """測試場景匯出與資料切分"""

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.directory.cleanup()

    def test_save_and_read(self):
        """測試場景 JSON 匯出與讀回"""
        scene = linear_scene({0: ((0.1, 0.2), (1.5, -0.5)), 3: ((4, 4), (0, 1))},
                             obstacles=np.array([[1.0, 1.0]]))
        path = os.path.join(self.directory.name, "scene.json")
        save_scene(scene, path)
        loaded = read_scene(path)
        self.assertEqual(loaded.frame_ids, scene.frame_ids)
        self.assertEqual(loaded.agent_ids(), scene.agent_ids())
        for frame_id in scene.frame_ids:
            for agent_id, state in scene.states[frame_id].items():
                np.testing.assert_array_equal(loaded.states[frame_id][agent_id].position, state.position)
                np.testing.assert_array_equal(loaded.states[frame_id][agent_id].velocity, state.velocity)
        np.testing.assert_array_equal(loaded.obstacles, scene.obstacles)

    def test_corrupt_scene(self):
        """測試損毀的場景檔"""
        path = _write(self.directory.name, "broken.json", ["{not json"])
        with self.assertRaises(CrowdForecastParseError):
            read_scene(path)

    def test_write_trajectories(self):
        """測試輸出軌跡檔可再載入"""
        scene = linear_scene({0: ((0.1, 0.2), (1.5, -0.5))})
        path = os.path.join(self.directory.name, "out.txt")
        write_trajectories(scene, path)
        loaded = load_trajectories(path)
        np.testing.assert_array_equal(loaded.states[19][0].position, scene.states[19][0].position)

    def test_leave_one_out(self):
        """測試留一場景切分"""
        scenes = [linear_scene({0: ((0, 0), (1, 0))}, name=name) for name in ("eth", "hotel", "zara")]
        train, test = split_leave_one_out(scenes, "hotel")
        self.assertEqual([scene.name for scene in train], ["eth", "zara"])
        self.assertEqual([scene.name for scene in test], ["hotel"])
        with self.assertRaises(CrowdForecastLookupError):
            split_leave_one_out(scenes, "univ")

    def test_subsample(self):
        """測試視窗抽樣"""
        windows = window_scene(linear_scene({0: ((0, 0), (1, 0))}, frames=40))
        kept = subsample_windows(windows, 0.25, np.random.default_rng(0))
        self.assertEqual(len(kept), round(0.25 * len(windows)))
        self.assertEqual([window.index for window in kept], sorted(window.index for window in kept))
        with self.assertRaises(CrowdForecastContractError):
            subsample_windows(windows, 0.0, np.random.default_rng(0))


if __name__ == '__main__':
    unittest.main()
