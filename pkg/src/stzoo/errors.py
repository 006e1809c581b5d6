class StzooError(Exception):
    """Base class of every contract violation raised by stzoo."""


class ConfigError(StzooError, ValueError):
    pass


class SpecError(StzooError, ValueError):
    pass


class ShapeError(StzooError, ValueError):
    pass


class WeightsError(StzooError, ValueError):
    pass


class CheckpointError(StzooError, RuntimeError):
    pass


class DataError(StzooError, ValueError):
    pass


class TrainingError(StzooError, RuntimeError):
    pass


class AnalysisError(StzooError, ValueError):
    pass


class ProfilingError(StzooError, RuntimeError):
    pass
