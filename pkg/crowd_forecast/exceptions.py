from typing import Dict, Optional


class CrowdForecastError(Exception):
    """Base exception class for crowd-forecast errors"""
    pass


class CrowdForecastParseError(CrowdForecastError):
    """Raised when an input file cannot be parsed"""

    def __init__(self, message: str, line_number: int = None, path: str = None) -> None:
        self.line_number = line_number
        self.path = path
        if line_number is not None:
            message = f"{path or '<input>'}:{line_number}: {message}"
        super().__init__(message)


class CrowdForecastValidationError(CrowdForecastError):
    """Raised when data violates a documented invariant"""
    pass


class CrowdForecastShapeError(CrowdForecastError):
    """Raised when array dimensions do not line up"""
    pass


class CrowdForecastNumericError(CrowdForecastError):
    """Raised when a computation produces non-finite values"""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None) -> None:
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CrowdForecastLookupError(CrowdForecastError):
    """Raised when an agent, frame, window or goal entry does not exist"""
    pass


class CrowdForecastContractError(CrowdForecastError):
    """Raised when a caller breaks an operation's precondition"""
    pass


class CrowdForecastUsageError(CrowdForecastError):
    """Raised when an API is used out of order, e.g. a stale backward cache"""
    pass


class CrowdForecastConfigError(CrowdForecastError):
    """Raised when configuration is invalid"""
    pass


class CrowdForecastProjectiveError(CrowdForecastError):
    """Raised when a homography maps a point to infinity"""
    pass


class CrowdForecastCheckpointError(CrowdForecastError):
    """Raised when a checkpoint is corrupt or was written by another format version"""

    def __init__(self, message: str, format_version: int = None) -> None:
        self.format_version = format_version
        super().__init__(message)


class CrowdForecastTrainingAborted(CrowdForecastNumericError):
    """Raised when training hits a non-finite loss; carries the last good parameters"""

    def __init__(self, message: str, last_good: Dict = None, history: list = None, diagnostics: Optional[Dict] = None) -> None:
        self.last_good = last_good or {}
        self.history = history or []
        super().__init__(message, diagnostics)
