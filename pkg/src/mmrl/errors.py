"""Exception hierarchy shared by every module.

Each class maps to one failure family so the CLI can translate it into an
exit code without string matching.
"""


class MMRLError(Exception):
    """Base class for all package errors."""


class ShapeError(MMRLError, ValueError):
    pass


class ContractError(MMRLError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateMaskError(ContractError):
    pass


class NormalizationError(MMRLError, ValueError):
    pass


class DeterminismError(MMRLError):
    pass


class CapacityError(MMRLError, ValueError):
    pass


class ConfigError(MMRLError, ValueError):
    pass


class DataError(MMRLError):
    pass


class FormatError(MMRLError):
    """File was readable but written by an incompatible format version."""


class IntegrityError(MMRLError):
    """File is corrupted or truncated."""


class ProtocolError(MMRLError):
    """An evaluation-protocol or freezing invariant was broken."""


class DivergenceError(MMRLError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value
