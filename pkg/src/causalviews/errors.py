"""Exception hierarchy. Every error raised by the package derives from
:class:`CausalViewsError`; the CLI maps config errors to exit code 2 and
numeric failures to exit code 3."""

from __future__ import annotations


class CausalViewsError(Exception):
    """Base class for package errors."""


class InvalidConfigError(CausalViewsError, ValueError):
    """A parameter set is inconsistent or out of range."""


class EventLookupError(CausalViewsError, KeyError):
    """An event id or link is not present in the causal set."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class MalformedHistoryError(CausalViewsError, ValueError):
    """The link graph is not a DAG or violates a structural bound."""


class ShapeError(CausalViewsError, ValueError):
    """Array dimensions disagree."""


class NumericalError(CausalViewsError, ArithmeticError):
    """Base for failures of a numeric procedure (CLI exit code 3)."""


class DegenerateEventError(NumericalError):
    """An event must emit momentum but receives none."""


class UndefinedVarietyError(NumericalError):
    """Variety needs at least two events."""


class DegenerateDirectionError(NumericalError):
    """A projector was requested for a (near) zero momentum."""


class IncompatibleMomentaError(NumericalError):
    """Link momenta are not path additive around some cycle.

    Attributes
    ----------
    cycle : list of int
        Event ids around the worst offending cycle, closed (first == last).
    residual : float
        Norm of the loop-sum mismatch on that cycle.
    """

    def __init__(self, message: str, cycle: list[int], residual: float):
        super().__init__(message)
        self.cycle = cycle
        self.residual = residual


class ResolutionError(NumericalError):
    """The grid is too coarse for the requested stencil quantity."""


class FitError(NumericalError):
    """Too few points for a regression."""


class InstabilityError(NumericalError):
    """Time stepping produced non-finite values.

    Attributes
    ----------
    step : int
        Index of the first step that failed.
    diagnostics : dict
        Snapshot of min density, max |S| and time before the failure.
    """

    def __init__(self, message: str, step: int, diagnostics: dict):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics
