"""Exception hierarchy shared by every module."""


class LatteError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LatteError, ValueError):
    """Bad input detected before any work was done (CLI exit code 1)."""


class ZeroVector(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class BadClass(ValidationError):
    pass


class BadClient(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class EmptyMemory(ValidationError):
    pass


class EmptyDomain(ValidationError):
    pass


class AssumptionViolation(ValidationError):
    """A theory world breaks one of the ball-mixture assumptions."""

    def __init__(self, assumption: int, message: str):
        super().__init__(f"Assumption {assumption}: {message}")
        self.assumption = assumption


class ConfigError(ValidationError):
    pass


class FormatError(LatteError):
    """On-disk dataset is unreadable or corrupt."""


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class LabelOutOfRange(FormatError):
    pass


class NonFiniteEmbedding(FormatError):
    def __init__(self, row: int, what: str = "embeddings"):
        super().__init__(f"non-finite value in {what} row {row}")
        self.row = row


class SimulationError(LatteError):
    """A component failed mid-run; carries the failing client and sample."""

    def __init__(self, client: int, step: int, cause: BaseException):
        super().__init__(f"client {client}, sample {step}: {type(cause).__name__}: {cause}")
        self.client = client
        self.step = step
        self.cause = cause
