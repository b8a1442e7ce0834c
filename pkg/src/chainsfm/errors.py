"""Exception hierarchy for chain SfM."""


class ChainSfmError(Exception):
    """Base class for all library errors."""


# --- geometry -------------------------------------------------------------

class GeometryError(ChainSfmError):
    pass


class CoincidentEndpoints(GeometryError):
    pass


class ParallelRays(GeometryError):
    pass


class ParallelPlanes(GeometryError):
    pass


class ParallelLines(GeometryError):
    pass


class NegativeDepth(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class CenterOnLine(GeometryError):
    pass


# --- scale estimation -----------------------------------------------------

class DegenerateConfiguration(ChainSfmError):
    """A formula denominator is too close to zero to be trusted.

    `reason` identifies the vanishing factor.
    """

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class DegenerateMinimizer(ChainSfmError):
    pass


class InconsistentSign(ChainSfmError):
    pass


# --- robust estimation / chain -------------------------------------------

class NoValidHypothesis(ChainSfmError):
    pass


class NegativeScale(ChainSfmError):
    pass


class BrokenChain(ChainSfmError):
    pass


class DegenerateAlignment(ChainSfmError):
    pass


# --- bundle adjustment ----------------------------------------------------

class EmptyProblem(ChainSfmError):
    pass


class DivergedNaN(ChainSfmError):
    """Raised when a residual went non-finite; carries the last valid state."""

    def __init__(self, message, last_valid=None):
        super().__init__(message)
        self.last_valid = last_valid


# --- synthetic scenes -----------------------------------------------------

class InfeasibleSpec(ChainSfmError):
    pass


# --- io -------------------------------------------------------------------

class DatasetError(ChainSfmError):
    pass


class ParseError(DatasetError):
    def __init__(self, message, path=None, line=None):
        loc = f"{path}:{line}: " if path is not None else ""
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class DanglingReference(DatasetError):
    pass


class MissingIntrinsics(DatasetError):
    pass


class IoError(ChainSfmError):
    pass
