"""
Frequency-response engine: rational transfer elements and pure delays,
composed into trees and evaluated exactly at complex frequencies.

Coefficients are ascending-power real arrays (c0 + c1*s + c2*s^2 ...).
Delays stay symbolic (e^{-sT}); nothing is Padé-approximated.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import optimize

from errors import InvalidRange, PoleAtEvaluationPoint


def _as_s_array(s):
    arr = np.asarray(s, dtype=complex)
    return np.atleast_1d(arr)


class TransferElement(ABC):
    """
    A node of a composition tree evaluable at any complex frequency.

    Operators build new trees: ``a * b`` is the series connection,
    ``a + b`` the parallel sum, ``a.inverse()`` the reciprocal and
    ``k * a`` a scalar scale. Scalars are promoted to constant elements.
    """

    @abstractmethod
    def response(self, s):
        """
        Evaluate on an array of complex frequencies.

        Raises:
            PoleAtEvaluationPoint: with ``index`` set to the first offending
            position of ``s``.
        """

    @property
    @abstractmethod
    def is_real(self):
        """True when every leaf has real coefficients."""

    def __call__(self, s):
        return evaluate(self, s)

    def inverse(self):
        return Inverse(self)

    def __mul__(self, other):
        if isinstance(other, TransferElement):
            return Series(self, other)
        return Scaled(self, other)

    def __rmul__(self, other):
        return Scaled(self, other)

    def __add__(self, other):
        return ParallelSum(self, _promote(other))

    def __radd__(self, other):
        return ParallelSum(_promote(other), self)

    def __neg__(self):
        return Scaled(self, -1.0)

    def __sub__(self, other):
        return ParallelSum(self, -_promote(other))

    def __rsub__(self, other):
        return ParallelSum(_promote(other), -self)

    def __truediv__(self, other):
        if isinstance(other, TransferElement):
            return Series(self, Inverse(other))
        return Scaled(self, 1.0 / other)

    def __rtruediv__(self, other):
        return Scaled(Inverse(self), other)


def _promote(value):
    if isinstance(value, TransferElement):
        return value
    return constant(value)


# ============================================================================
# Leaves
# ============================================================================

class RationalElement(TransferElement):
    """num(s) / den(s) with ascending-power real coefficients."""

    def __init__(self, num_coeffs, den_coeffs=(1.0,)):
        num = np.atleast_1d(np.asarray(num_coeffs, dtype=float))
        den = np.atleast_1d(np.asarray(den_coeffs, dtype=float))
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise InvalidRange("rational coefficients must be finite")
        den = P.polytrim(den, tol=0.0)
        if not np.any(den != 0.0):
            raise InvalidRange("denominator coefficients are all zero")
        self.num_coeffs = P.polytrim(num, tol=0.0)
        self.den_coeffs = den

    @property
    def is_real(self):
        return True

    def response(self, s):
        s = _as_s_array(s)
        den = P.polyval(s, self.den_coeffs)
        zero = np.flatnonzero(den == 0)
        if zero.size:
            k = int(zero[0])
            raise PoleAtEvaluationPoint(complex(s[k]), k)
        return P.polyval(s, self.num_coeffs) / den

    def __repr__(self):
        return f"RationalElement(num={self.num_coeffs.tolist()}, den={self.den_coeffs.tolist()})"


class DelayElement(TransferElement):
    """Pure delay e^{-sT}."""

    def __init__(self, delay_s):
        if not (math.isfinite(delay_s) and delay_s >= 0):
            raise InvalidRange(f"delay must be finite and non-negative, got {delay_s}")
        self.delay_s = float(delay_s)

    @property
    def is_real(self):
        return True

    def response(self, s):
        s = _as_s_array(s)
        return np.exp(-s * self.delay_s)

    def __repr__(self):
        return f"DelayElement({self.delay_s!r})"


# ============================================================================
# Composition nodes
# ============================================================================

class Series(TransferElement):

    def __init__(self, left, right):
        self.left = left
        self.right = right

    @property
    def is_real(self):
        return self.left.is_real and self.right.is_real

    def response(self, s):
        return self.left.response(s) * self.right.response(s)


class ParallelSum(TransferElement):

    def __init__(self, left, right):
        self.left = left
        self.right = right

    @property
    def is_real(self):
        return self.left.is_real and self.right.is_real

    def response(self, s):
        return self.left.response(s) + self.right.response(s)


class Inverse(TransferElement):

    def __init__(self, inner):
        self.inner = inner

    @property
    def is_real(self):
        return self.inner.is_real

    def response(self, s):
        s = _as_s_array(s)
        inner = self.inner.response(s)
        zero = np.flatnonzero(inner == 0)
        if zero.size:
            k = int(zero[0])
            raise PoleAtEvaluationPoint(complex(s[k]), k)
        return 1.0 / inner


class Scaled(TransferElement):

    def __init__(self, inner, gain):
        self.inner = inner
        self.gain = complex(gain) if isinstance(gain, complex) else float(gain)

    @property
    def is_real(self):
        return self.inner.is_real and not isinstance(self.gain, complex)

    def response(self, s):
        return self.gain * self.inner.response(s)


# ============================================================================
# Constructors
# ============================================================================

def constant(value):
    return RationalElement([value], [1.0])


def laplace_s():
    """The differentiator s."""
    return RationalElement([0.0, 1.0], [1.0])


def series(*elements):
    out = elements[0]
    for elem in elements[1:]:
        out = Series(out, elem)
    return out


def parallel_sum(*elements):
    out = _promote(elements[0])
    for elem in elements[1:]:
        out = ParallelSum(out, _promote(elem))
    return out


def inverse(elem):
    return Inverse(elem)


def scale(elem, gain):
    return Scaled(elem, gain)


# ============================================================================
# Grids and responses
# ============================================================================

@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Strictly ascending, positive angular frequencies in rad/s."""

    omega: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float).ravel()
        if omega.size == 0:
            raise InvalidRange("frequency grid is empty")
        if not np.all(np.isfinite(omega)) or np.any(omega <= 0):
            raise InvalidRange("grid points must be finite and positive")
        if np.any(np.diff(omega) <= 0):
            raise InvalidRange("grid points must be strictly ascending")
        omega.setflags(write=False)
        object.__setattr__(self, 'omega', omega)

    @classmethod
    def from_hz(cls, freqs_hz):
        return cls(2 * np.pi * np.asarray(freqs_hz, dtype=float))

    @property
    def hz(self):
        return self.omega / (2 * np.pi)

    def __len__(self):
        return self.omega.size

    def same_as(self, other):
        return len(self) == len(other) and np.array_equal(self.omega, other.omega)


@dataclass(frozen=True, eq=False)
class FrequencyResponse:
    grid: FrequencyGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex).ravel()
        if values.size != len(self.grid):
            raise InvalidRange(
                f"response has {values.size} values for a {len(self.grid)}-point grid"
            )
        object.__setattr__(self, 'values', values)

    @property
    def hz(self):
        return self.grid.hz

    @property
    def magnitude(self):
        return np.abs(self.values)

    @property
    def magnitude_db(self):
        return 20 * np.log10(np.abs(self.values))

    @property
    def phase_deg(self):
        return np.degrees(np.angle(self.values))

    def __len__(self):
        return self.values.size


def evaluate(elem, s):
    """
    Evaluate ``elem`` at a single complex frequency.

    Raises:
        ValueError: if ``s`` is not finite
        PoleAtEvaluationPoint: if a denominator is exactly zero at ``s``
    """
    s = complex(s)
    if not (math.isfinite(s.real) and math.isfinite(s.imag)):
        raise ValueError(f"evaluation point must be finite, got {s!r}")
    try:
        value = elem.response(np.array([s]))[0]
    except PoleAtEvaluationPoint as e:
        raise PoleAtEvaluationPoint(e.s) from None
    return complex(value)


def frequency_response(elem, grid):
    """values[k] = elem(j * grid.omega[k]); a pole on the grid names its index."""
    values = elem.response(1j * grid.omega)
    return FrequencyResponse(grid, values)


def log_grid(f_min_hz, f_max_hz, points_per_decade):
    """
    Logarithmically spaced grid in rad/s, both endpoints included.

    The point count is decades * points_per_decade + 1 (rounded up for
    fractional spans).
    """
    try:
        f_min = float(f_min_hz)
        f_max = float(f_max_hz)
    except (TypeError, ValueError):
        raise InvalidRange("grid limits must be numbers") from None
    if not (math.isfinite(f_min) and math.isfinite(f_max) and 0 < f_min < f_max):
        raise InvalidRange(f"need 0 < f_min < f_max, got ({f_min_hz}, {f_max_hz})")
    if int(points_per_decade) != points_per_decade or points_per_decade < 1:
        raise InvalidRange(f"points_per_decade must be an integer >= 1, got {points_per_decade}")

    decades = math.log10(f_max / f_min)
    count = int(math.ceil(decades * points_per_decade - 1e-9)) + 1
    freqs = np.logspace(math.log10(f_min), math.log10(f_max), count)
    freqs[0], freqs[-1] = f_min, f_max
    return FrequencyGrid.from_hz(freqs)


def bracket_root(func, lo, hi, tol=1e-9, max_iter=200):
    """
    Root of ``func`` on [lo, hi] by Brent's method.

    When rounding leaves no sign change between the ends, the end with the
    smaller residual is returned.
    """
    f_lo = func(lo)
    if f_lo == 0:
        return lo
    f_hi = func(hi)
    if f_hi == 0:
        return hi
    if (f_lo < 0) == (f_hi < 0):
        return lo if abs(f_lo) <= abs(f_hi) else hi
    return optimize.brentq(func, lo, hi, xtol=tol, maxiter=max_iter)
