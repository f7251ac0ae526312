from imgp.constants import EXIT_CONFIG_ERROR, EXIT_IO_ERROR, EXIT_NUMERICAL_FAILURE


class ImgpError(Exception):
    exit_code = EXIT_NUMERICAL_FAILURE


# ============================================================
# Configuration and input validation
# ============================================================
class ConfigError(ImgpError):
    exit_code = EXIT_CONFIG_ERROR


class EmptyCloud(ConfigError):
    pass


class KTooLarge(ConfigError):
    pass


class NonPositiveBandwidth(ConfigError):
    pass


class UnsupportedSmoothness(ConfigError):
    pass


class NoLabeledRows(ConfigError):
    pass


class LengthMismatch(ConfigError):
    pass


class DegeneratePrior(ConfigError):
    pass


# ============================================================
# Numerical failures
# ============================================================
class NumericalError(ImgpError):
    exit_code = EXIT_NUMERICAL_FAILURE


class NumericallyDetached(NumericalError):
    pass


class MaxItersExceeded(NumericalError):
    def __init__(self, message, solution=None, iterations=0):
        super().__init__(message)
        self.solution = solution
        self.iterations = iterations


class BreakdownDetected(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class EigenvalueAtOne(NumericalError):
    pass


class AllRestartsFailed(NumericalError):
    pass


# ============================================================
# Data files
# ============================================================
class DataError(ImgpError):
    exit_code = EXIT_IO_ERROR


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionMismatch(DataError):
    pass


class StageError(ImgpError):
    """Wraps a failure raised while running one stage of an experiment."""

    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error
        self.exit_code = getattr(error, "exit_code", EXIT_NUMERICAL_FAILURE)
        if isinstance(error, OSError):
            self.exit_code = EXIT_IO_ERROR
