"""
Exception hierarchy for gfmp.

Input errors map to CLI exit code 2, numeric failures to exit code 3.
Experiment outcomes (divergence, unstable scans) are data, not failures.
"""


class GfmpError(Exception):
    """Base class for every error raised by this package."""


# ============================================================================
# Input errors (exit code 2)
# ============================================================================

class InputError(GfmpError, ValueError):
    """Malformed or out-of-range user input."""


class InvalidRange(InputError):
    pass


class DegenerateDesign(InputError):
    pass


class GridMismatch(InputError):
    pass


class WindowTooShort(InputError):
    pass


class FileFormatError(InputError):
    pass


class ConfigError(InputError):
    pass


class GuardBandViolation(InputError):
    """A scan frequency falls inside the guard band around the fundamental."""

    def __init__(self, f_hz, f_1_hz, guard_hz):
        self.f_hz = f_hz
        super().__init__(
            f"{f_hz:g} Hz lies within ±{guard_hz:g} Hz of the fundamental "
            f"({f_1_hz:g} Hz); the PR resonance dominates there"
        )


# ============================================================================
# Numeric errors (exit code 3)
# ============================================================================

class NumericError(GfmpError, ArithmeticError):
    """The numerics could not produce a trustworthy value."""


class PoleAtEvaluationPoint(NumericError):

    def __init__(self, s, index=None):
        self.s = s
        self.index = index
        where = f" (grid index {index})" if index is not None else ""
        super().__init__(f"element has a pole at s = {s!r}{where}")

    def at_index(self, index):
        return PoleAtEvaluationPoint(self.s, index)


class GridTooCoarse(NumericError):

    def __init__(self, f_hz, step_deg, hint="increase analysis.points_per_decade"):
        self.f_hz = f_hz
        self.step_deg = step_deg
        self.hint = hint
        super().__init__(
            f"return-ratio phase jumps {step_deg:.1f}° near {f_hz:.2f} Hz; {hint}"
        )


# ============================================================================
# Experiment outcomes (reported as data, exit code 0)
# ============================================================================

class ExperimentOutcome(GfmpError):
    pass


class DivergenceDetected(ExperimentOutcome):

    def __init__(self, t, trace=None):
        self.t = t
        self.trace = trace
        super().__init__(f"divergence detected at t = {t:.6f} s")


class ScanUnstable(ExperimentOutcome):

    def __init__(self, f_hz, growth):
        self.f_hz = f_hz
        self.growth = growth
        super().__init__(
            f"response at {f_hz:g} Hz grew by {growth * 100:.1f}% between measure windows"
        )
