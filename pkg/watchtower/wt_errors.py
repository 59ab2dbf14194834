class WatchtowerError(Exception):
    """Root of every error raised by the package."""


## data problems -> cli exit code 2
class DataError(WatchtowerError):
    pass


## numeric / shape contract violations
class ShapeError(WatchtowerError, ValueError):
    pass


class DegenerateRowError(WatchtowerError, ValueError):
    pass


class TargetIndexError(WatchtowerError, IndexError):
    pass


class NumericError(WatchtowerError, ArithmeticError):
    pass


class ConfigurationError(WatchtowerError, ValueError):
    pass


class OrderingError(WatchtowerError, ValueError):
    pass


class VocabularyError(WatchtowerError, KeyError):

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class RankError(WatchtowerError, ValueError):
    pass


class StageOrderError(WatchtowerError, RuntimeError):
    pass


class UndefinedMetricError(WatchtowerError, ValueError):
    pass


class AlignmentError(DataError):
    pass


class GenerationError(DataError):
    pass


class SchemaVersionError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ConfigHashError(DataError):
    pass


## training blew up -> cli exit code 3
class TrainingError(WatchtowerError, RuntimeError):

    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"{message} (step {step})")
        self.step = step
