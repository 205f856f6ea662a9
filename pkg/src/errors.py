class TdCalError(Exception):
    """Root of every error raised by this package."""


class ConfigError(TdCalError):
    pass


class DatasetError(TdCalError):
    """A dataset file could not be read or parsed."""

    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class FactorEvaluationError(TdCalError):
    """A factor cannot be evaluated at the given values; the solver drops it."""


class BehindCamera(FactorEvaluationError):
    pass


class DegenerateDepth(FactorEvaluationError):
    pass


class OffsetOutOfRange(FactorEvaluationError):
    pass


class ImuGapError(TdCalError):
    """Two consecutive IMU samples are not strictly increasing or too far apart."""


class RelinearizationRequired(TdCalError):
    """Bias moved too far from the preintegration linearization point."""


class SolverError(TdCalError):
    pass


class SolverDiverged(SolverError):
    pass


class SingularBlock(SolverError):
    pass


class EstimatorError(TdCalError):
    def __init__(self, message: str, frame_index: int | None = None):
        self.frame_index = frame_index
        prefix = f"frame {frame_index}: " if frame_index is not None else ""
        super().__init__(f"{prefix}{message}")


class NonMonotonicTimestamp(EstimatorError):
    pass


class InsufficientImu(EstimatorError):
    pass


class InitializationPending(EstimatorError):
    pass


class TimeOffsetDiverged(EstimatorError):
    pass


class SimulationError(TdCalError):
    pass


class TrajectoryOutOfRange(SimulationError):
    pass


class InsufficientVisibility(SimulationError):
    pass


class InsufficientOverlap(TdCalError):
    pass
