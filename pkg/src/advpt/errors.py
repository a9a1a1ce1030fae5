"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class AdvPTError(Exception):
    exit_code = 1


class ConfigError(AdvPTError, ValueError):
    """Invalid configuration (attack, tuning, defense or run config)."""

    exit_code = 2


class InputError(AdvPTError, ValueError):
    """Malformed input data: wrong shapes, empty datasets, bad labels."""

    exit_code = 3


class VocabularyError(InputError):
    def __init__(self, token: str):
        super().__init__(f"token {token!r} is not in the vocabulary")
        self.token = token


class DimensionError(InputError):
    pass


class NumericError(AdvPTError, ArithmeticError):
    """Non-finite values or undefined quantities (e.g. cosine of a zero vector)."""

    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class IntegrityError(AdvPTError):
    """Frozen parameters changed, or an artifact does not match its provenance."""

    exit_code = 5


class FormatError(IntegrityError):
    pass


class CorruptionError(IntegrityError):
    pass


class StageError(AdvPTError):
    """A pipeline stage failed; wraps the original cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
