import logging
from functools import wraps

from enums import ExitCode
from errors import (
    ConfigError,
    DatasetError,
    EstimatorError,
    InitializationPending,
    InsufficientOverlap,
    SimulationError,
    SolverError,
    TimeOffsetDiverged,
)
from utils import Error, Success


def ensure_initialized(fn):
    """
    Decorator for estimator methods that need a bootstrapped window.
    Raises InitializationPending before `bootstrap` has run.
    """

    @wraps(fn)
    def wrapper(self, *args, **kwargs):
        if not self.initialized:
            raise InitializationPending(f"{fn.__name__} called before bootstrap", self.frame_count)
        return fn(self, *args, **kwargs)

    return wrapper


def exit_code_for(exc: BaseException) -> ExitCode:
    if isinstance(exc, (ConfigError, ValueError)):
        return ExitCode.USAGE
    if isinstance(exc, (TimeOffsetDiverged, SolverError)):
        return ExitCode.DIVERGED
    if isinstance(exc, (DatasetError, InsufficientOverlap, SimulationError, EstimatorError, OSError)):
        return ExitCode.DATA_ERROR
    raise exc


def cli_command(fn):
    """
    Decorator for CLI command handlers returning a Success.
    Failures are logged and turned into the matching process exit code.
    """

    @wraps(fn)
    def wrapper(*args, **kwargs) -> ExitCode:
        try:
            result = fn(*args, **kwargs)
        except Exception as e:
            code = exit_code_for(e)
            logging.error(f"{fn.__name__} failed: {Error(str(e))}")
            return code
        if isinstance(result, Success):
            logging.info(str(result))
        return ExitCode.SUCCESS

    return wrapper
