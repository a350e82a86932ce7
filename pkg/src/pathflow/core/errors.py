class PathflowError(Exception):
    """Base class for all errors raised by pathflow."""


class UsageError(PathflowError):
    """Invalid use of the API (cross-tape inputs, bad shapes, bad batch sizes)."""


class NumericError(PathflowError):
    """A non-finite value was produced during evaluation."""


class DegenerateWeights(PathflowError):
    """Every importance weight underflowed to zero (or is NaN)."""


class ConstructionError(PathflowError):
    """A synthetic batch could not be constructed to the requested separation."""

    def __init__(self, message: str, achieved_ratio: float):
        super().__init__(f"{message} (achieved ratio {achieved_ratio:.3e})")
        self.achieved_ratio = achieved_ratio


class ParseError(PathflowError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line


class ConfigError(PathflowError):
    """Invalid run configuration; `key` names the offending dotted key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class TrainingAborted(PathflowError):
    """Too many consecutive numeric failures during training."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class ChainFailure(PathflowError):
    """An HMC chain could not be recovered."""
