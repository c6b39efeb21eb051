"""
Measurements on simulated traces: injection-based impedance scans, FFT
spectra of a single phase, and trace summaries for the mode-transition
experiment.
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import signal

import simulator
from errors import GridMismatch, GuardBandViolation, InvalidRange, ScanUnstable, WindowTooShort
from impedance import z_eq_delay, z_eq_sampled
from models import va_element

logger = logging.getLogger(__name__)

WINDOWS = ('rectangular', 'hann')
REFERENCES = ('sampled', 'delay')


def worker_count():
    """Thread cap from GFMP_THREADS, else min(4, cpu count)."""
    raw = os.environ.get('GFMP_THREADS')
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise InvalidRange(f"GFMP_THREADS must be an integer, got '{raw}'") from None
        if n < 1:
            raise InvalidRange(f"GFMP_THREADS must be >= 1, got {n}")
        return n
    return min(4, os.cpu_count() or 1)


def _window(name, n):
    if name not in WINDOWS:
        raise InvalidRange(f"unknown window '{name}', expected one of {WINDOWS}")
    if name == 'rectangular':
        return np.ones(n)
    return signal.get_window('hann', n)


def single_bin_dft(x, t, f_hz, window='hann'):
    """Complex amplitude of the e^{j2πft} component of x sampled at t."""
    w = _window(window, len(x))
    return np.sum(w * x * np.exp(-1j * 2 * np.pi * f_hz * t)) / np.sum(w)


# ============================================================================
# Frequency scan
# ============================================================================

@dataclass(frozen=True)
class ScanConfig:
    frequencies_hz: tuple
    injection_amplitude: float
    settle_cycles: int = 20
    measure_cycles: int = 10
    min_settle_s: float = 0.1
    min_measure_s: float = 0.05
    f_1_hz: float = 60.0
    guard_hz: float = 5.0
    growth_limit: float = 0.05
    reference: str = 'sampled'

    def __post_init__(self):
        object.__setattr__(self, 'frequencies_hz', tuple(float(f) for f in self.frequencies_hz))
        if not self.injection_amplitude > 0:
            raise InvalidRange(f"injection amplitude must be > 0, got {self.injection_amplitude}")
        if self.settle_cycles < 0 or self.measure_cycles < 2:
            raise InvalidRange("need settle_cycles >= 0 and measure_cycles >= 2")
        if self.reference not in REFERENCES:
            raise InvalidRange(f"unknown scan reference '{self.reference}', expected one of {REFERENCES}")
        for f in self.frequencies_hz:
            if not (math.isfinite(f) and f > 0):
                raise InvalidRange(f"scan frequencies must be positive, got {f}")
            if abs(f - self.f_1_hz) <= self.guard_hz:
                raise GuardBandViolation(f, self.f_1_hz, self.guard_hz)

    def settle_s(self, f_hz):
        return max(self.settle_cycles / f_hz, self.min_settle_s)

    def measure_s(self, f_hz):
        """Whole injection cycles covering at least min_measure_s."""
        cycles = max(self.measure_cycles, math.ceil(self.min_measure_s * f_hz))
        return cycles / f_hz


@dataclass(frozen=True)
class ScanPoint:
    f_hz: float
    z_measured: complex
    z_analytic: complex
    z_delay: complex
    mag_err_pct: float
    phase_err_deg: float
    status: str = 'ok'
    growth: float = 0.0
    delay_mag_err_pct: float = math.nan
    delay_phase_err_deg: float = math.nan


@dataclass(frozen=True, eq=False)
class ScanResult:
    """
    Measured points with their errors against the reference form and,
    separately, against the delay-aware form.
    """

    points: list
    reference: str = 'sampled'

    def _ok(self):
        return [p for p in self.points if p.status == 'ok']

    def _worst(self, attr):
        ok = self._ok()
        return max(getattr(p, attr) for p in ok) if ok else None

    @property
    def max_mag_err_pct(self):
        return self._worst('mag_err_pct')

    @property
    def max_phase_err_deg(self):
        return self._worst('phase_err_deg')

    @property
    def max_delay_mag_err_pct(self):
        return self._worst('delay_mag_err_pct')

    @property
    def max_delay_phase_err_deg(self):
        return self._worst('delay_phase_err_deg')

    @property
    def unstable_hz(self):
        return [p.f_hz for p in self.points if p.status != 'ok']

    def to_frame(self):
        return pd.DataFrame({
            'f_hz': [p.f_hz for p in self.points],
            'z_meas_re_ohm': [p.z_measured.real for p in self.points],
            'z_meas_im_ohm': [p.z_measured.imag for p in self.points],
            'z_ref_re_ohm': [p.z_analytic.real for p in self.points],
            'z_ref_im_ohm': [p.z_analytic.imag for p in self.points],
            'z_delay_re_ohm': [p.z_delay.real for p in self.points],
            'z_delay_im_ohm': [p.z_delay.imag for p in self.points],
            'mag_err_pct': [p.mag_err_pct for p in self.points],
            'phase_err_deg': [p.phase_err_deg for p in self.points],
            'delay_mag_err_pct': [p.delay_mag_err_pct for p in self.points],
            'delay_phase_err_deg': [p.delay_phase_err_deg for p in self.points],
            'status': [p.status for p in self.points],
        })

    def to_dict(self):
        return {
            'reference': self.reference,
            'points': len(self.points),
            'max_mag_err_pct': self.max_mag_err_pct,
            'max_phase_err_deg': self.max_phase_err_deg,
            'delay_max_mag_err_pct': self.max_delay_mag_err_pct,
            'delay_max_phase_err_deg': self.max_delay_phase_err_deg,
            'unstable_hz': self.unstable_hz,
        }


def _errors(z_meas, z_ref):
    mag = abs(abs(z_meas) - abs(z_ref)) / abs(z_ref) * 100
    phase = abs(math.degrees(np.angle(z_meas / z_ref)))
    return mag, phase


def _scan_sim(sim, t_end):
    return replace(sim, t_end=t_end, injection=None, dither_a=0.0, seed=None)


def measure_impedance_at(f_hz, scan, sim, baseline):
    """
    Inject at f_hz and return the measured Z_eq = -ΔV_pcc/ΔI.

    Raises:
        ScanUnstable: response grows by more than scan.growth_limit between
        the two halves of the measure window, or the perturbed run diverges
    """
    t_s = sim.controller.t_s
    settle = scan.settle_s(f_hz)
    measure = scan.measure_s(f_hz)
    t_end = settle + measure + 2 * t_s

    run_cfg = replace(
        _scan_sim(sim, t_end),
        injection=simulator.Injection(f_hz, scan.injection_amplitude, ramp_s=settle / 2),
    )
    perturbed = simulator.run(run_cfg)
    if perturbed.diverged_at is not None:
        raise ScanUnstable(f_hz, math.inf)

    n = len(perturbed)
    t = perturbed.t
    dv = perturbed.v_pcc - baseline.v_pcc[:n]
    di = perturbed.i - baseline.i[:n]

    half = 0.5 * t_s
    window = (t >= settle - half) & (t < settle + measure - half)
    idx = np.flatnonzero(window)

    mid = idx.size // 2
    first = abs(single_bin_dft(di[idx[:mid]], t[idx[:mid]], f_hz))
    second = abs(single_bin_dft(di[idx[mid:]], t[idx[mid:]], f_hz))
    growth = second / first - 1.0 if first > 0 else math.inf
    if growth > scan.growth_limit:
        raise ScanUnstable(f_hz, growth)

    x_v = single_bin_dft(dv[idx], t[idx], f_hz)
    x_i = single_bin_dft(di[idx], t[idx], f_hz)
    return complex(-x_v / x_i), growth


def frequency_scan(scan, sim, threads=None):
    """
    Measure the inverter impedance at each scan frequency and grade it
    against the scan.reference form of the first scheduled VA and against
    the delay-aware form.

    Every frequency is a perturbed run differenced against one shared
    unperturbed baseline; points run on a thread pool.
    """
    freqs = scan.frequencies_hz
    if not freqs:
        logger.warning("Empty frequency list; nothing to scan")
        return ScanResult(points=[], reference=scan.reference)

    start_time = time.time()
    c = sim.controller.with_delay(True)
    va_elem = va_element(sim.va_schedule[0].va_params)
    ref_elem = (z_eq_sampled if scan.reference == 'sampled' else z_eq_delay)(va_elem, c, sim.plant)
    delay_elem = z_eq_delay(va_elem, c, sim.plant)

    t_s = c.t_s
    longest = max(scan.settle_s(f) + scan.measure_s(f) for f in freqs) + 2 * t_s
    baseline = simulator.run(_scan_sim(sim, longest))
    if baseline.diverged_at is not None:
        logger.warning(f"Unperturbed run diverged at t = {baseline.diverged_at:.4f} s; every point is unstable")

    def one(f):
        z_ref = complex(ref_elem(1j * 2 * math.pi * f))
        z_del = complex(delay_elem(1j * 2 * math.pi * f))
        if baseline.diverged_at is not None:
            return ScanPoint(f, complex('nan'), z_ref, z_del, math.nan, math.nan, 'unstable', math.inf)
        try:
            z_meas, growth = measure_impedance_at(f, scan, sim, baseline)
        except ScanUnstable as e:
            logger.warning(str(e))
            return ScanPoint(f, complex('nan'), z_ref, z_del, math.nan, math.nan, 'unstable', e.growth)
        mag, phase = _errors(z_meas, z_ref)
        d_mag, d_phase = _errors(z_meas, z_del)
        logger.debug(f"{f:8.2f} Hz: |Z| measured {abs(z_meas):.3f} vs {abs(z_ref):.3f} Ω "
                     f"({mag:.2f}%, {phase:.2f}°), delay form {abs(z_del):.3f} Ω "
                     f"({d_mag:.2f}%, {d_phase:.2f}°)")
        return ScanPoint(f, z_meas, z_ref, z_del, mag, phase, 'ok', growth, d_mag, d_phase)

    # run() is a Python loop holding the GIL; threads only overlap its numpy calls
    n_workers = threads or worker_count()
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        points = list(pool.map(one, freqs))

    logger.info(f"PERF: frequency_scan({len(freqs)} points, {n_workers} threads) "
                f"took {time.time() - start_time:.3f}s")
    return ScanResult(points=points, reference=scan.reference)


# ============================================================================
# Spectrum
# ============================================================================

@dataclass(frozen=True, eq=False)
class SpectrumReport:
    f_hz: np.ndarray
    magnitude: np.ndarray
    dominant_harmonic_hz: float
    dominant_magnitude: float
    window: str
    fundamental_magnitude: float
    resolution_hz: float
    t_start: float
    t_end: float
    channel: str

    def to_frame(self):
        return pd.DataFrame({'f_hz': self.f_hz, 'magnitude': self.magnitude})

    def to_dict(self):
        return {
            'channel': self.channel,
            'window': self.window,
            't_start_s': self.t_start,
            't_end_s': self.t_end,
            'resolution_hz': self.resolution_hz,
            'dominant_harmonic_hz': self.dominant_harmonic_hz,
            'dominant_magnitude': self.dominant_magnitude,
            'fundamental_magnitude': self.fundamental_magnitude,
        }


def spectrum(x, f_s, window='hann', f_1_hz=60.0, exclude_bins=2):
    """
    Single-sided amplitude spectrum of a real signal with coherent-gain
    correction. Returns (freqs, magnitude, dominant index, fundamental index).
    """
    n = len(x)
    w = _window(window, n)
    mags = np.abs(np.fft.rfft(x * w)) * 2.0 / np.sum(w)
    mags[0] /= 2.0
    if n % 2 == 0:
        mags[-1] /= 2.0
    freqs = np.fft.rfftfreq(n, 1.0 / f_s)

    k1 = int(round(f_1_hz / (f_s / n)))
    candidates = np.ones(mags.size, dtype=bool)
    candidates[0] = False
    candidates[max(0, k1 - exclude_bins):k1 + exclude_bins + 1] = False
    if not np.any(candidates):
        raise WindowTooShort("no bins left outside the fundamental neighborhood")
    k_dom = int(np.flatnonzero(candidates)[np.argmax(mags[candidates])])
    return freqs, mags, k_dom, min(k1, mags.size - 1)


def fft_spectrum(trace, channel='i', window='hann', t_start=None, t_end=None, f_1_hz=60.0, min_cycles=10):
    """
    Phase-A spectrum (real part of the αβ vector) over t_start <= t < t_end.

    Raises:
        InvalidRange: t_end <= t_start
        WindowTooShort: fewer than min_cycles fundamental periods selected
    """
    t = trace.t
    t0 = t[0] if t_start is None else t_start
    t1 = t[-1] + 1.0 / trace.f_s if t_end is None else t_end
    if t1 <= t0:
        raise InvalidRange(f"t_end ({t1}) must be after t_start ({t0})")

    half = 0.5 / trace.f_s
    mask = (t >= t0 - half) & (t < t1 - half)
    n = int(np.count_nonzero(mask))
    duration = n / trace.f_s
    if duration < min_cycles / f_1_hz - half:
        raise WindowTooShort(
            f"window holds {duration * f_1_hz:.2f} fundamental cycles; at least {min_cycles} needed"
        )

    x = trace.channel(channel)[mask].real
    freqs, mags, k_dom, k1 = spectrum(x, trace.f_s, window=window, f_1_hz=f_1_hz)
    return SpectrumReport(
        f_hz=freqs,
        magnitude=mags,
        dominant_harmonic_hz=float(freqs[k_dom]),
        dominant_magnitude=float(mags[k_dom]),
        window=window,
        fundamental_magnitude=float(mags[k1]),
        resolution_hz=trace.f_s / n,
        t_start=float(t0),
        t_end=float(t1),
        channel=channel,
    )


def compare_responses(a, b):
    """
    Pointwise relative magnitude error and absolute phase error of b
    against a, with the worst point by magnitude error.

    Raises:
        GridMismatch: the responses live on different grids
    """
    if not a.grid.same_as(b.grid):
        raise GridMismatch("responses must share the same frequency grid")
    mag_err = np.abs(np.abs(b.values) - np.abs(a.values)) / np.abs(a.values) * 100
    phase_err = np.abs(np.degrees(np.angle(b.values / a.values)))
    worst = int(np.argmax(mag_err))
    return {
        'max_mag_err_pct': float(mag_err[worst]),
        'max_phase_err_deg': float(np.max(phase_err)),
        'worst_f_hz': float(a.hz[worst]),
    }


# ============================================================================
# Trace summary
# ============================================================================

def harmonic_component(x, t, f_1_hz, f_s):
    """x minus its slowly varying positive-sequence fundamental."""
    n1 = max(1, int(round(f_s / f_1_hz)))
    rot = np.exp(1j * 2 * np.pi * f_1_hz * t)
    base = x / rot
    kernel = np.ones(n1)
    # partial windows at the ends average over the samples they have
    count = np.convolve(np.ones(x.size), kernel, mode='same')
    fund = (np.convolve(base.real, kernel, mode='same') + 1j * np.convolve(base.imag, kernel, mode='same')) / count
    return x - fund * rot


def _cycle_rms(x, n1):
    blocks = x.size // n1
    if blocks == 0:
        return np.array([])
    seg = x[:blocks * n1].reshape(blocks, n1)
    return np.sqrt(np.mean(np.abs(seg) ** 2, axis=1) / 2)


def summarize_trace(trace, cfg, f_1_hz=None):
    """
    Per schedule interval: P/Q statistics, harmonic current RMS, growth rate
    of the harmonic envelope and its dominant frequency. Also whether the
    harmonic content fell back after the last switch, and whether the run
    ends in an oscillation above cfg.oscillation_threshold_a (flagged like
    a divergence).
    """
    f_1 = f_1_hz or cfg.controller.f_1
    f_s = trace.f_s
    n1 = max(1, int(round(f_s / f_1)))
    i_h = harmonic_component(trace.i, trace.t, f_1, f_s)
    t_last = trace.t[-1] + 1.0 / f_s if len(trace) else 0.0
    threshold = cfg.oscillation_threshold_a

    intervals = []
    entries = list(cfg.va_schedule)
    for j, entry in enumerate(entries):
        t0 = entry.t_start
        t1 = entries[j + 1].t_start if j + 1 < len(entries) else cfg.t_end
        mask = (trace.t >= t0) & (trace.t < t1)
        if not np.any(mask):
            continue
        rms_blocks = _cycle_rms(i_h[mask], n1)
        growth = None
        if rms_blocks.size >= 3 and np.all(rms_blocks > 0):
            tb = t0 + (np.arange(rms_blocks.size) + 0.5) * n1 / f_s
            growth = float(np.polyfit(tb, np.log(rms_blocks), 1)[0])
        dominant = None
        if np.count_nonzero(mask) >= 4 * n1:
            freqs, mags, k_dom, _ = spectrum(trace.i[mask].real, f_s, window='rectangular', f_1_hz=f_1)
            dominant = float(freqs[k_dom])
        intervals.append({
            'mode': entry.va_mode,
            't_start_s': float(t0),
            't_end_s': float(min(t1, t_last)),
            'p_mean_w': float(np.mean(trace.p[mask])),
            'p_std_w': float(np.std(trace.p[mask])),
            'q_mean_var': float(np.mean(trace.q[mask])),
            'q_std_var': float(np.std(trace.q[mask])),
            'harmonic_rms_a': float(np.sqrt(np.mean(np.abs(i_h[mask]) ** 2) / 2)),
            'harmonic_peak_rms_a': float(rms_blocks.max()) if rms_blocks.size else None,
            'oscillating': bool(rms_blocks.size and rms_blocks[-1] > threshold),
            'growth_rate_per_s': growth,
            'dominant_hz': dominant,
        })

    conv_peaks = [iv['harmonic_peak_rms_a'] for iv in intervals
                  if iv['mode'] == 'conventional' and iv['harmonic_peak_rms_a'] is not None]
    restabilized = None
    if conv_peaks and intervals and intervals[-1]['mode'] == 'proposed' and trace.diverged_at is None:
        tail = _cycle_rms(i_h[trace.t >= t_last - 3 * n1 / f_s], n1)
        if tail.size:
            restabilized = bool(tail[-1] < 0.5 * max(conv_peaks))

    # a saturated command bounds the oscillation instead of letting it reach the cap
    sustained = False
    if trace.diverged_at is None and len(trace):
        tail = _cycle_rms(i_h[trace.t >= t_last - 3 * n1 / f_s], n1)
        sustained = bool(tail.size and np.all(tail > threshold))
    if sustained:
        logger.warning(f"Sustained harmonic oscillation: {tail[-1]:.3f} A RMS over the last cycle "
                       f"exceeds {threshold:.3f} A")

    last = trace.t >= max(trace.t[0], t_last - 0.2) if len(trace) else np.array([], dtype=bool)
    return {
        'samples': len(trace),
        'diverged': trace.diverged_at is not None,
        'diverged_at_s': trace.diverged_at,
        'sustained_oscillation': sustained,
        'flagged': trace.diverged_at is not None or sustained,
        'oscillation_threshold_a': threshold,
        'p_final_mean_w': float(np.mean(trace.p[last])) if np.any(last) else None,
        'q_final_mean_var': float(np.mean(trace.q[last])) if np.any(last) else None,
        'intervals': intervals,
        'restabilized': restabilized,
    }
