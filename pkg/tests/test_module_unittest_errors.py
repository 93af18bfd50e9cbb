import io
import unittest
from contextlib import redirect_stderr

from crowd_forecast.cli import EXIT_NUMERIC, EXIT_USAGE, EXIT_VALIDATION, _error_record, _exit_code, main
from crowd_forecast.exceptions import (
    CrowdForecastCheckpointError,
    CrowdForecastConfigError,
    CrowdForecastContractError,
    CrowdForecastError,
    CrowdForecastLookupError,
    CrowdForecastNumericError,
    CrowdForecastParseError,
    CrowdForecastProjectiveError,
    CrowdForecastShapeError,
    CrowdForecastTrainingAborted,
    CrowdForecastUsageError,
    CrowdForecastValidationError,
)


class TestErrorHierarchy(unittest.TestCase):
    """測試例外類別階層"""

    def test_every_error_is_a_crowd_forecast_error(self):
        """測試所有例外都繼承共同基底"""
        for error_type in (CrowdForecastParseError, CrowdForecastValidationError, CrowdForecastShapeError,
                           CrowdForecastNumericError, CrowdForecastLookupError, CrowdForecastContractError,
                           CrowdForecastUsageError, CrowdForecastConfigError, CrowdForecastProjectiveError,
                           CrowdForecastCheckpointError, CrowdForecastTrainingAborted):
            with self.subTest(error_type=error_type.__name__):
                self.assertTrue(issubclass(error_type, CrowdForecastError))
        self.assertTrue(issubclass(CrowdForecastTrainingAborted, CrowdForecastNumericError))

    def test_parse_error_location(self):
        """測試解析錯誤帶有行號與路徑"""
        error = CrowdForecastParseError("bad record", 7, "scene.txt")
        self.assertEqual(error.line_number, 7)
        self.assertEqual(error.path, "scene.txt")
        self.assertEqual(str(error), "scene.txt:7: bad record")
        self.assertEqual(str(CrowdForecastParseError("bad record")), "bad record")
        self.assertEqual(str(CrowdForecastParseError("bad record", 3)), "<input>:3: bad record")

    def test_numeric_error_diagnostics(self):
        """測試數值錯誤的診斷資訊"""
        self.assertEqual(CrowdForecastNumericError("nan").diagnostics, {})
        self.assertEqual(CrowdForecastNumericError("nan", {"step": 3}).diagnostics, {"step": 3})

    def test_training_aborted_payload(self):
        """測試訓練中止時保留的資料"""
        error = CrowdForecastTrainingAborted("loss is nan", {"env/mu": [0.0]}, [1.5, 1.2], {"epoch": 2})
        self.assertEqual(error.last_good, {"env/mu": [0.0]})
        self.assertEqual(error.history, [1.5, 1.2])
        self.assertEqual(error.diagnostics["epoch"], 2)

    def test_checkpoint_version(self):
        """測試檢查點版本"""
        self.assertEqual(CrowdForecastCheckpointError("old", format_version=0).format_version, 0)
        self.assertIsNone(CrowdForecastCheckpointError("broken").format_version)


class TestExitCodes(unittest.TestCase):
    """測試例外對應的結束碼"""

    def test_mapping(self):
        """測試結束碼對應"""
        cases = {
            CrowdForecastUsageError("x"): EXIT_USAGE,
            CrowdForecastConfigError("x"): EXIT_USAGE,
            CrowdForecastLookupError("x"): EXIT_USAGE,
            CrowdForecastValidationError("x"): EXIT_VALIDATION,
            CrowdForecastParseError("x", 1): EXIT_VALIDATION,
            CrowdForecastContractError("x"): EXIT_VALIDATION,
            CrowdForecastCheckpointError("x"): EXIT_VALIDATION,
            CrowdForecastShapeError("x"): EXIT_VALIDATION,
            CrowdForecastProjectiveError("x"): EXIT_VALIDATION,
            CrowdForecastNumericError("x"): EXIT_NUMERIC,
            CrowdForecastTrainingAborted("x"): EXIT_NUMERIC,
        }
        for error, code in cases.items():
            with self.subTest(error=type(error).__name__):
                self.assertEqual(_exit_code(error), code)
        self.assertEqual((EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC), (2, 3, 4))

    def test_error_record(self):
        """測試錯誤紀錄內容"""
        record = _error_record(CrowdForecastNumericError("nan loss", {"epoch": 1}), EXIT_NUMERIC)
        self.assertIn('"error": "CrowdForecastNumericError"', record)
        self.assertIn('"exit_code": 4', record)
        self.assertIn('"diagnostics": {"epoch": 1}', record)
        self.assertNotIn("diagnostics", _error_record(CrowdForecastUsageError("x"), EXIT_USAGE))

    def test_missing_input_file(self):
        """測試輸入檔不存在"""
        with redirect_stderr(io.StringIO()) as stderr:
            code = main(["evaluate", "--pred", "/nonexistent/pred.jsonl", "--scene", "/nonexistent/scene.json",
                         "--out", "/nonexistent/out.json"])
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("CrowdForecastUsageError", stderr.getvalue())


if __name__ == '__main__':
    unittest.main()
