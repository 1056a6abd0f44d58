"""Exception hierarchy.

Two error families matter to callers: bad input (malformed expressions,
chart mismatches, invalid job files) and numerical decisions that could
not be made reliably (rank calls without a clear gap, unstable finite
differences, flow breakdown).  The CLI maps them to exit codes 1 and 2.
"""


class MaxclassError(Exception):
    """Base class for every error raised by this package."""


class InputError(MaxclassError):
    """Invalid user input."""


class ExprSyntaxError(InputError):
    """Malformed expression text.  `position` is a 0-based offset."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class UndeclaredVariableError(InputError):
    """A variable name not present in the governing chart."""

    def __init__(self, name, chart_names, position=None):
        at = f" (at offset {position})" if position is not None else ""
        super().__init__(
            f"variable {name!r} is not declared in chart {tuple(chart_names)}{at}"
        )
        self.name = name
        self.position = position


class ChartMismatchError(InputError):
    """Objects attached to different charts were combined."""


class EvaluationDomainError(MaxclassError):
    """Evaluation left the domain of an expression (ln of nonpositive,
    division by zero).  Carries the offending subexpression's source."""

    def __init__(self, message, subexpr_source):
        super().__init__(f"{message} in {subexpr_source!r}")
        self.message = message
        self.subexpr_source = subexpr_source


class NumericalInstabilityError(MaxclassError):
    """A numerical decision failed at the requested tolerance."""


class RankInstabilityError(NumericalInstabilityError):
    """No usable gap in the singular values; rank cannot be called.

    smallest_retained / largest_discarded are the two singular values
    straddling the cut, so the failure is diagnosable from the message.
    """

    def __init__(self, message, smallest_retained, largest_discarded):
        super().__init__(
            f"{message}: smallest retained singular value "
            f"{smallest_retained:.3e}, largest discarded {largest_discarded:.3e}"
        )
        self.smallest_retained = smallest_retained
        self.largest_discarded = largest_discarded


class StepInstabilityError(NumericalInstabilityError):
    """A finite-difference result changed under step halving."""


class FlowStepError(NumericalInstabilityError):
    """The Taylor stepper's step size underflowed (field too singular)."""


class StratumError(NumericalInstabilityError):
    """A covector does not lie in the stratum an operation requires
    (e.g. the kernel of the restricted symplectic form is not a line)."""


class WindowError(NumericalInstabilityError):
    """A curve left its working window (nonpositive determinant inside a
    logarithm, vanishing denominator solution, lost transversality)."""
