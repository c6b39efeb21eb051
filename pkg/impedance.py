"""
Equivalent output impedance of the VA-CC inverter and the two stability
checks built on it: a passivity scan of Re{Z_eq(jω)} and a Nyquist
assessment of the return ratio Z_g/Z_eq.

Forms of Z_eq:
    ideal   - 1/Y_v + sL_f/(G_cc·Y_v), full PR controller, no delay
    closed  - proportional-gain closed form for the series R-L admittance
    delay   - [e^{-sT_d}G_cc + sL_f] / [1 - e^{-sT_d} + G_cc·Y_v]
    sampled - as delay, with the reference path G_cc·Y_v delayed too
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from errors import GridTooCoarse, InvalidRange, NumericError
from models import (
    VaParams,
    gcc_pr,
    va_element,
    va_impedance_element,
    z_grid_at_pcc,
    zg_from_scr,
)
from tfcore import (
    DelayElement,
    FrequencyGrid,
    RationalElement,
    bracket_root,
    constant,
    frequency_response,
    laplace_s,
    log_grid,
)

logger = logging.getLogger(__name__)

VARIANTS = ('ideal', 'closed', 'delay', 'sampled')

# Band edges and crossovers are refined on the analytic element to this width
EDGE_TOL_HZ = 1e-7
CROSSOVER_TOL_HZ = 1e-4

# The locus is "on" -1 when |1 + L| drops below this
MARGINAL_TOL = 1e-6


def default_grid(f_max_hz=10_000.0, f_min_hz=10.0, points_per_decade=200):
    return log_grid(f_min_hz, f_max_hz, points_per_decade)


# ============================================================================
# Z_eq forms
# ============================================================================

def z_eq_ideal(va_elem, c, p, gcc=None):
    """1/Y_v(s) + sL_f/(G_cc(s)·Y_v(s)); gcc defaults to the PR element."""
    if gcc is None:
        gcc = gcc_pr(c)
    return va_elem.inverse() + (p.l_f * laplace_s()) / (gcc * va_elem)


def z_eq_conv_closed_form(va, c, p):
    """R_v + sL_v + sL_f(R_v + sL_v)/K_cc,p"""
    if not isinstance(va, VaParams):
        raise InvalidRange("the closed form only exists for the series R-L admittance")
    k = c.k_cc_p
    return RationalElement(
        [va.r_v, va.l_v + p.l_f * va.r_v / k, p.l_f * va.l_v / k],
        [1.0],
    )


def negative_resistance_term(va, c, p, f_hz):
    """-ω²L_fL_v/K_cc,p: the real part the CC adds on top of R_v."""
    if not (math.isfinite(f_hz) and f_hz > 0):
        raise InvalidRange(f"f_hz must be > 0, got {f_hz}")
    w = 2 * math.pi * f_hz
    return -(w ** 2) * p.l_f * va.l_v / c.k_cc_p


def closed_form_onset_hz(va, c, p):
    """Frequency where the closed-form real part R_v - ω²L_fL_v/K_cc,p crosses zero."""
    return math.sqrt(va.r_v * c.k_cc_p / (p.l_f * va.l_v)) / (2 * math.pi)


def z_eq_delay(va_elem, c, p, gcc=None):
    if gcc is None:
        gcc = gcc_pr(c)
    delay = DelayElement(c.t_d)
    num = delay * gcc + p.l_f * laplace_s()
    den = constant(1.0) - delay + gcc * va_elem
    return num / den


def z_eq_sampled(va_elem, c, p, gcc=None):
    """
    [e^{-sT_d}G_cc + sL_f] / [1 - e^{-sT_d} + e^{-sT_d}G_cc·Y_v]

    The delay acts on the whole voltage command, reference path included,
    as it does in the sampled-data controller of the simulator.
    """
    if gcc is None:
        gcc = gcc_pr(c)
    delay = DelayElement(c.t_d)
    num = delay * gcc + p.l_f * laplace_s()
    den = constant(1.0) - delay + delay * gcc * va_elem
    return num / den


@dataclass(frozen=True)
class ZeqModel:
    variant: str
    va: object
    controller: object
    plant: object

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidRange(f"unknown Z_eq variant '{self.variant}', expected one of {VARIANTS}")
        if self.variant == 'closed' and not isinstance(self.va, VaParams):
            raise InvalidRange("variant 'closed' requires the conventional series R-L admittance")

    def element(self):
        if self.variant == 'closed':
            return z_eq_conv_closed_form(self.va, self.controller, self.plant)
        va_elem = va_element(self.va)
        if self.variant == 'ideal':
            return z_eq_ideal(va_elem, self.controller, self.plant)
        if self.variant == 'sampled':
            return z_eq_sampled(va_elem, self.controller, self.plant)
        return z_eq_delay(va_elem, self.controller, self.plant)


def build_zeq(variant, va, c, p):
    return ZeqModel(variant, va, c, p).element()


# ============================================================================
# Tables
# ============================================================================

def bode_frame(response, prefix='', unit='_ohm'):
    """f_hz plus re/im/mag_db/phase_deg columns for one response."""
    return pd.DataFrame({
        'f_hz': response.hz,
        f'{prefix}re{unit}': response.values.real,
        f'{prefix}im{unit}': response.values.imag,
        f'{prefix}mag_db': response.magnitude_db,
        f'{prefix}phase_deg': response.phase_deg,
    })


def va_impedance_table(grid, va_conv, va_prop):
    """1/Y_v of both admittances on one grid."""
    conv = frequency_response(va_impedance_element(va_conv), grid)
    prop = frequency_response(va_impedance_element(va_prop), grid)
    left = bode_frame(conv, prefix='conv_')
    right = bode_frame(prop, prefix='prop_').drop(columns=['f_hz'])
    return pd.concat([left, right], axis=1)


# ============================================================================
# Passivity
# ============================================================================

@dataclass(frozen=True, eq=False)
class PassivityReport:
    grid: FrequencyGrid
    re_zeq: np.ndarray
    im_zeq: np.ndarray
    non_passive_bands: list
    first_violation_hz: float = None
    guard_band_hz: tuple = None

    @property
    def is_passive(self):
        return not self.non_passive_bands

    def to_frame(self):
        z = self.re_zeq + 1j * self.im_zeq
        return pd.DataFrame({
            'f_hz': self.grid.hz,
            're_zeq_ohm': self.re_zeq,
            'im_zeq_ohm': self.im_zeq,
            'mag_db': 20 * np.log10(np.abs(z)),
            'phase_deg': np.degrees(np.angle(z)),
        })

    def to_dict(self):
        return {
            'f_min_hz': float(self.grid.hz[0]),
            'f_max_hz': float(self.grid.hz[-1]),
            'points': len(self.grid),
            'non_passive_bands_hz': [[lo, hi] for lo, hi in self.non_passive_bands],
            'first_violation_hz': self.first_violation_hz,
            'min_re_zeq_ohm': float(np.min(self.re_zeq)),
            'guard_band_hz': list(self.guard_band_hz) if self.guard_band_hz else None,
        }


def _real_part_at(zeq, f_hz):
    return zeq(1j * 2 * math.pi * f_hz).real


def _segment_bands(zeq, f, re):
    """Negative runs of ``re`` on one contiguous segment, edges refined."""
    bands = []
    neg = re < 0
    n = len(f)
    start = None
    for i in range(n):
        if neg[i] and (i == 0 or not neg[i - 1]):
            if i == 0:
                start = float(f[0])
            else:
                start = bracket_root(lambda x: _real_part_at(zeq, x), f[i - 1], f[i], tol=EDGE_TOL_HZ)
        if neg[i] and (i == n - 1 or not neg[i + 1]):
            if i == n - 1:
                end = float(f[-1])
            else:
                end = bracket_root(lambda x: _real_part_at(zeq, x), f[i], f[i + 1], tol=EDGE_TOL_HZ)
            bands.append((float(start), float(end)))
    return bands


def passivity_scan(zeq, grid, f_1_hz=None, guard_hz=5.0):
    """
    Scan Re{Z_eq(jω)} and report the bands where it is negative.

    Args:
        zeq: impedance element
        grid: FrequencyGrid to scan
        f_1_hz: fundamental; points within ±guard_hz of it are dropped
        guard_hz: half-width of the excluded neighborhood

    Returns:
        PassivityReport over the kept grid points. first_violation_hz is
        the lowest band start outside the guard band, even below 2·f_1:
        the conventional onset sits near 77 Hz.
    """
    hz = grid.hz
    keep = np.ones(len(grid), dtype=bool)
    guard = None
    if f_1_hz is not None:
        guard = (f_1_hz - guard_hz, f_1_hz + guard_hz)
        keep = (hz < guard[0]) | (hz > guard[1])
        if not np.any(keep):
            raise InvalidRange("every grid point lies inside the guard band")
    kept = FrequencyGrid(grid.omega[keep])
    values = frequency_response(zeq, kept).values
    re = values.real

    f = kept.hz
    # The guard band splits the grid; edges are never refined across it
    segments = [np.arange(len(f))]
    if guard is not None:
        below = f < guard[0]
        segments = [idx for idx in (np.flatnonzero(below), np.flatnonzero(~below)) if idx.size]

    bands = []
    for idx in segments:
        bands.extend(_segment_bands(zeq, f[idx], re[idx]))
    bands.sort()

    first = bands[0][0] if bands else None
    if bands:
        logger.debug(f"Non-passive bands: {[(round(a, 2), round(b, 2)) for a, b in bands]}")

    return PassivityReport(
        grid=kept,
        re_zeq=re,
        im_zeq=values.imag,
        non_passive_bands=bands,
        first_violation_hz=first,
        guard_band_hz=guard,
    )


# ============================================================================
# Return ratio
# ============================================================================

@dataclass(frozen=True, eq=False)
class StabilityAssessment:
    return_ratio: object
    gain_crossover_hz: list
    phase_crossover_hz: list
    encirclements_of_minus_one: int
    verdict: str
    phase_margin_deg: list = field(default_factory=list)
    zeq_phase_90_hz: list = field(default_factory=list)
    min_distance_to_minus_one: float = None

    def to_frame(self):
        return bode_frame(self.return_ratio, prefix='l_', unit='')

    def to_dict(self):
        return {
            'verdict': self.verdict,
            'encirclements_of_minus_one': self.encirclements_of_minus_one,
            'gain_crossover_hz': self.gain_crossover_hz,
            'phase_crossover_hz': self.phase_crossover_hz,
            'phase_margin_deg': self.phase_margin_deg,
            'zeq_phase_90_hz': self.zeq_phase_90_hz,
            'min_distance_to_minus_one': self.min_distance_to_minus_one,
        }


def count_encirclements(loop_values):
    """
    Clockwise encirclements of -1 by the Nyquist locus of L.

    ``loop_values`` holds L(jω) on ascending ω > 0; the negative-frequency
    branch is its conjugate, and the ends are joined by straight segments.
    """
    z = 1.0 + np.asarray(loop_values, dtype=complex)
    path = np.concatenate([np.conj(z[::-1]), z, np.conj(z[-1:])])
    steps = np.angle(path[1:] / path[:-1])
    winding = steps.sum() / (2 * math.pi)
    count = int(round(-winding))
    if abs(-winding - count) > 0.05:
        logger.warning(f"Winding number {-winding:.3f} is not close to an integer")
    return count


def _gain_crossovers(loop, f, mag):
    out = []
    above = mag - 1.0
    for i in range(len(f) - 1):
        if above[i] == 0:
            out.append(float(f[i]))
        elif above[i] * above[i + 1] < 0:
            out.append(bracket_root(lambda x: abs(loop(1j * 2 * math.pi * x)) - 1.0,
                                   f[i], f[i + 1], tol=CROSSOVER_TOL_HZ))
    return out


def _phase_crossovers(loop, f, phase):
    """Where the unwrapped phase passes an odd multiple of 180 degrees."""
    out = []
    for i in range(len(f) - 1):
        a, b = phase[i], phase[i + 1]
        lo, hi = min(a, b), max(a, b)
        m_lo = math.ceil((lo / math.pi - 1) / 2)
        m_hi = math.floor((hi / math.pi - 1) / 2)
        # a crossing landing exactly on a grid point belongs to the step ending there
        targets = [(2 * m + 1) * math.pi for m in range(m_lo, m_hi + 1)]
        if not [t for t in targets if t != a]:
            continue
        out.append(bracket_root(lambda x: loop(1j * 2 * math.pi * x).imag,
                               f[i], f[i + 1], tol=CROSSOVER_TOL_HZ))
    return out


def return_ratio_assessment(zeq, zg, grid, max_step_deg=90.0):
    """
    Nyquist assessment of L = Z_g/Z_eq, assuming L is open-loop stable.

    Raises:
        GridTooCoarse: if the phase of L moves by max_step_deg or more
        between adjacent grid points
    """
    loop = zg / zeq
    response = frequency_response(loop, grid)
    values = response.values
    f = grid.hz

    steps = np.degrees(np.abs(np.angle(values[1:] / values[:-1])))
    if steps.size and np.max(steps) >= max_step_deg:
        k = int(np.argmax(steps >= max_step_deg))
        raise GridTooCoarse(float(f[k]), float(steps[k]))

    mag = np.abs(values)
    phase = np.unwrap(np.angle(values))

    gains = _gain_crossovers(loop, f, mag)
    phases = _phase_crossovers(loop, f, phase)
    margins = [180.0 + math.degrees(np.angle(loop(1j * 2 * math.pi * fc))) for fc in gains]
    margins = [((m + 180.0) % 360.0) - 180.0 for m in margins]

    re_zeq = frequency_response(zeq, grid).values.real
    quad = _segment_bands(zeq, f, re_zeq)
    zeq_90 = sorted({edge for band in quad for edge in band if f[0] < edge < f[-1]})

    n_enc = count_encirclements(values)
    distance = float(np.min(np.abs(1.0 + values)))

    if n_enc != 0:
        verdict = 'unstable'
    elif distance < MARGINAL_TOL:
        verdict = 'marginal'
    else:
        verdict = 'stable'

    if verdict == 'unstable':
        logger.warning(f"Return ratio encircles -1 {n_enc} time(s); gain crossovers at "
                       f"{[round(x, 1) for x in gains]} Hz")

    return StabilityAssessment(
        return_ratio=response,
        gain_crossover_hz=gains,
        phase_crossover_hz=phases,
        encirclements_of_minus_one=n_enc,
        verdict=verdict,
        phase_margin_deg=margins,
        zeq_phase_90_hz=zeq_90,
        min_distance_to_minus_one=distance,
    )


# ============================================================================
# Calibration, sensitivity and grid sweeps
# ============================================================================

def delay_gain_ratio(c, p):
    """K_cc,p·T_d/L_f; the current loop alone needs this below π/2."""
    return c.k_cc_p * c.t_d / p.l_f


def _with_gain(c, k):
    # the resonant gain keeps its ratio to the proportional gain
    return replace(c, k_cc_p=k, k_cc_r=c.k_cc_r * k / c.k_cc_p)


@dataclass(frozen=True)
class CalibrationResult:
    k_cc_p: float
    gain_crossover_hz: float
    phase_crossover_hz: float
    gain_error: float
    phase_error: float
    delay_gain_ratio: float
    within_tolerance: bool

    def to_dict(self):
        return dict(self.__dict__)


def _nearest(values, target):
    if not values:
        return None, math.inf
    best = min(values, key=lambda v: abs(v - target))
    return best, abs(best - target) / target


def calibrate_kccp(va, c, p, zg, k_range=(5.0, 200.0), points=120, gain_target_hz=358.0,
                   phase_target_hz=293.0, tolerance=0.15, grid=None):
    """
    Sweep K_cc,p and pick the value whose delay-aware return ratio best
    places a gain crossover near gain_target_hz and a phase crossover near
    phase_target_hz (minimax of the two relative distances).
    """
    k_lo, k_hi = k_range
    if not (0 < k_lo < k_hi):
        raise InvalidRange(f"need 0 < k_min < k_max, got {k_range}")
    grid = grid or default_grid(f_max_hz=c.nyquist_hz)
    va_elem = va_element(va)

    best = None
    best_score = math.inf
    for k in np.geomspace(k_lo, k_hi, points):
        ck = _with_gain(c, float(k))
        try:
            assessment = return_ratio_assessment(z_eq_delay(va_elem, ck, p), zg, grid)
        except NumericError as e:
            logger.debug(f"K_cc,p = {k:.3f} skipped: {e}")
            continue
        gc, g_err = _nearest(assessment.gain_crossover_hz, gain_target_hz)
        pc, p_err = _nearest(assessment.phase_crossover_hz, phase_target_hz)
        score = max(g_err, p_err)
        if score < best_score:
            best_score = score
            best = CalibrationResult(
                k_cc_p=float(k),
                gain_crossover_hz=gc,
                phase_crossover_hz=pc,
                gain_error=g_err,
                phase_error=p_err,
                delay_gain_ratio=delay_gain_ratio(ck, p),
                within_tolerance=score <= tolerance,
            )

    if best is None:
        raise NumericError("no K_cc,p in the range produced an assessable return ratio")

    logger.info(f"Calibrated K_cc,p = {best.k_cc_p:.4f} V/A: gain crossover "
                f"{best.gain_crossover_hz} Hz ({best.gain_error * 100:.1f}%), phase crossover "
                f"{best.phase_crossover_hz} Hz ({best.phase_error * 100:.1f}%)")
    if not best.within_tolerance:
        logger.warning(f"Best joint fit misses the ±{tolerance * 100:.0f}% targets")
    if best.delay_gain_ratio >= math.pi / 2:
        logger.warning(f"K_cc,p·T_d/L_f = {best.delay_gain_ratio:.2f} exceeds π/2; the current loop "
                       f"itself is unstable and the open-loop assumption of the Nyquist test fails")
    return best


def kccp_sensitivity(va, c, p, zg, k_values, grid=None):
    """Passivity onset and return-ratio crossovers versus K_cc,p, one row per gain."""
    grid = grid or default_grid(f_max_hz=c.nyquist_hz)
    va_elem = va_element(va)
    rows = []
    for k in k_values:
        ck = _with_gain(c, float(k))
        zeq = z_eq_delay(va_elem, ck, p)
        report = passivity_scan(zeq, grid, f_1_hz=ck.f_1)
        row = {
            'k_cc_p': float(k),
            'onset_delay_hz': report.first_violation_hz,
            'onset_closed_form_hz': closed_form_onset_hz(va, ck, p) if isinstance(va, VaParams) else None,
            'delay_gain_ratio': delay_gain_ratio(ck, p),
        }
        try:
            a = return_ratio_assessment(zeq, zg, grid)
            row.update({
                'gain_crossover_hz': ';'.join(f"{x:.2f}" for x in a.gain_crossover_hz),
                'phase_crossover_hz': ';'.join(f"{x:.2f}" for x in a.phase_crossover_hz),
                'verdict': a.verdict,
            })
        except GridTooCoarse as e:
            logger.warning(f"K_cc,p = {k:.3f}: {e}")
            row.update({'gain_crossover_hz': '', 'phase_crossover_hz': '', 'verdict': 'unresolved'})
        rows.append(row)
    return pd.DataFrame(rows)


def grid_sweep(zeq, base_grid, plant, omega_1, draws, grid=None, include_capacitor=True):
    """
    Return-ratio verdict for each (scr, xr_ratio) draw.

    Args:
        zeq: inverter impedance element
        base_grid: GridParams supplying V_g and P_rated
        draws: iterable of (scr, xr_ratio)

    Returns:
        list of dicts with scr, xr_ratio, verdict, encirclements
    """
    grid = grid or default_grid()
    results = []
    for scr, xr in draws:
        g = replace(base_grid, scr=float(scr), xr_ratio=float(xr), r_g=None, l_g=None)
        g, _ = zg_from_scr(g, omega_1)
        zg = z_grid_at_pcc(g, plant, include_capacitor=include_capacitor)
        a = return_ratio_assessment(zeq, zg, grid)
        results.append({
            'scr': float(scr),
            'xr_ratio': float(xr),
            'verdict': a.verdict,
            'encirclements': a.encirclements_of_minus_one,
        })
    unstable = sum(1 for r in results if r['verdict'] == 'unstable')
    logger.info(f"Grid sweep: {unstable}/{len(results)} draws unstable")
    return results
