"""Reditus errors."""

from typing import Optional


class ReditusError(Exception):
    """Base class for all reditus failures."""


class BudgetExceededError(ReditusError):
    """An enumeration, depth or sample budget was exhausted."""

    def __init__(self, what: str, needed: int, budget: int) -> None:
        super().__init__(f"{what}: needs {needed:,}, budget is {budget:,}")
        self.what = what
        self.needed = needed
        self.budget = budget


class InadmissibleWordError(ReditusError, ValueError):
    """A word violates the incidence matrix."""

    def __init__(self, word: tuple[int, ...], position: Optional[int] = None) -> None:
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"word {word} is not admissible{where}")
        self.word = word
        self.position = position


class IrreducibilityError(ReditusError, ValueError):
    """No finite irreducibility witness was found."""


class SummabilityError(ReditusError, ValueError):
    """A potential is not summable."""


class DegenerateMeasureError(ReditusError, ValueError):
    """A measure-zero set, or an all-equal sample, where positive mass is required."""


class CensoredError(ReditusError):
    """An orbit quantity exceeded the horizon."""

    def __init__(self, what: str, horizon: int) -> None:
        super().__init__(f"{what} censored at horizon {horizon:,}")
        self.horizon = horizon


class CodeExhaustedError(ReditusError, ValueError):
    """A coded point has no symbols left to shift."""


class UnsupportedFamilyError(ReditusError, ValueError):
    """A map family without exact interval images."""


class NonMarkovRegionError(ReditusError, ValueError):
    """A region that is not a union of partition cells."""


class ResolutionError(ReditusError, ValueError):
    """A radius below the float-resolved cell size."""

    def __init__(self, radius: float, minimum: float) -> None:
        super().__init__(f"radius {radius!r} is below the resolvable minimum {minimum!r}")
        self.radius = radius
        self.minimum = minimum


class LadderInfeasibleError(ReditusError):
    """The radius ladder of a divergence certificate cannot be built."""

    def __init__(self, stage: int, constraint: str) -> None:
        super().__init__(f"ladder infeasible at stage {stage}: binding constraint {constraint}")
        self.stage = stage
        self.constraint = constraint


class ConfigError(ReditusError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
