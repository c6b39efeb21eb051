import logging
from dataclasses import replace

import numpy as np
import pytest

from errors import GridMismatch, GuardBandViolation, InvalidRange, WindowTooShort
from measurement import (
    ScanConfig,
    compare_responses,
    fft_spectrum,
    frequency_scan,
    single_bin_dft,
    summarize_trace,
    worker_count,
)
import simulator
from simulator import Injection, SimTrace
from tfcore import FrequencyGrid, FrequencyResponse

F_S = 20000.0


def synthetic_trace(i, f_s=F_S):
    n = i.size
    zeros = np.zeros(n, dtype=complex)
    return SimTrace(
        t=np.arange(n) / f_s,
        e=zeros, v_pcc=zeros, i=i.astype(complex), i_ref=zeros, v_cmd=zeros,
        p=np.zeros(n), q=np.zeros(n),
        va_mode=np.array(['proposed'] * n),
        f_s=f_s,
    )


def two_tone(duration=0.2, a1=10.0, a2=0.8, f2=350.0):
    t = np.arange(int(round(duration * F_S))) / F_S
    return a1 * np.cos(2 * np.pi * 60 * t) + a2 * np.cos(2 * np.pi * f2 * t)


# ============================================================================
# Spectrum
# ============================================================================

@pytest.mark.parametrize("window", ["rectangular", "hann"])
def test_two_tone_recovery(window):
    trace = synthetic_trace(two_tone())
    report = fft_spectrum(trace, 'i', window, 0.1, 0.2, min_cycles=6)
    assert report.resolution_hz == pytest.approx(10.0)
    assert report.dominant_harmonic_hz == pytest.approx(350.0)
    assert report.dominant_magnitude == pytest.approx(0.8, rel=1e-9)
    assert report.fundamental_magnitude == pytest.approx(10.0, rel=1e-9)


def test_unit_sine_at_fundamental():
    t = np.arange(10000) / F_S
    report = fft_spectrum(synthetic_trace(np.sin(2 * np.pi * 60 * t)), 'i', 'hann')
    assert report.fundamental_magnitude == pytest.approx(1.0, rel=0.02)
    assert report.f_hz[np.argmax(report.magnitude)] == pytest.approx(60.0, abs=2.0)


def test_harmonic_next_to_fundamental():
    t = np.arange(10000) / F_S
    x = np.sin(2 * np.pi * 60 * t) + 0.3 * np.sin(2 * np.pi * 348 * t)
    report = fft_spectrum(synthetic_trace(x), 'i', 'hann')
    assert report.dominant_harmonic_hz == pytest.approx(348.0, abs=2.0)
    assert report.dominant_magnitude == pytest.approx(0.3, rel=0.03)


def test_on_bin_tone_does_not_leak():
    t = np.arange(2000) / F_S
    report = fft_spectrum(synthetic_trace(np.cos(2 * np.pi * 250 * t)), 'i', 'rectangular', min_cycles=6)
    k = int(np.argmax(report.magnitude))
    assert report.f_hz[k] == pytest.approx(250.0)
    others = np.delete(report.magnitude, [k - 1, k, k + 1])
    assert np.max(others) < 1e-3 * report.magnitude[k]


def test_spectrum_uses_phase_a_projection():
    t = np.arange(2000) / F_S
    i = 5.0 * np.exp(1j * 2 * np.pi * 60 * t) + 0.5 * np.exp(1j * 2 * np.pi * 250 * t)
    report = fft_spectrum(synthetic_trace(i), 'i', 'rectangular', min_cycles=6)
    assert report.dominant_harmonic_hz == pytest.approx(250.0)
    assert report.dominant_magnitude == pytest.approx(0.5, rel=1e-9)


def test_spectrum_frame_and_dict():
    report = fft_spectrum(synthetic_trace(two_tone()), 'i', 'hann', 0.0, 0.2)
    frame = report.to_frame()
    assert list(frame.columns) == ['f_hz', 'magnitude']
    assert frame['f_hz'].iloc[-1] == pytest.approx(F_S / 2)
    assert report.to_dict()['dominant_harmonic_hz'] == pytest.approx(350.0)


def test_window_too_short():
    with pytest.raises(WindowTooShort):
        fft_spectrum(synthetic_trace(two_tone()), 'i', 'hann', 0.1, 0.2, min_cycles=10)


def test_reversed_window_rejected():
    with pytest.raises(InvalidRange):
        fft_spectrum(synthetic_trace(two_tone()), 'i', 'hann', 0.2, 0.1)


def test_unknown_window_rejected():
    with pytest.raises(InvalidRange):
        fft_spectrum(synthetic_trace(two_tone()), 'i', 'flattop', 0.0, 0.2)


def test_single_bin_dft_of_rotating_tone():
    t = np.arange(400) / F_S
    x = (2.0 - 1.0j) * np.exp(1j * 2 * np.pi * 500 * t)
    assert single_bin_dft(x, t, 500.0, window='rectangular') == pytest.approx(2.0 - 1.0j)
    assert single_bin_dft(x, t, 500.0, window='hann') == pytest.approx(2.0 - 1.0j)


# ============================================================================
# Response comparison
# ============================================================================

def test_compare_identical_responses():
    grid = FrequencyGrid.from_hz([10.0, 100.0, 1000.0])
    a = FrequencyResponse(grid, [1 + 1j, 2.0, -3j])
    result = compare_responses(a, a)
    assert result['max_mag_err_pct'] == pytest.approx(0.0, abs=1e-12)
    assert result['max_phase_err_deg'] == pytest.approx(0.0, abs=1e-12)


def test_compare_reports_worst_point():
    grid = FrequencyGrid.from_hz([10.0, 100.0, 1000.0])
    a = FrequencyResponse(grid, [1.0, 1.0, 1.0])
    b = FrequencyResponse(grid, [1.01, 1.10, 1.0 * np.exp(1j * np.radians(3))])
    result = compare_responses(a, b)
    assert result['max_mag_err_pct'] == pytest.approx(10.0)
    assert result['worst_f_hz'] == pytest.approx(100.0)
    assert result['max_phase_err_deg'] == pytest.approx(3.0)


def test_compare_pure_scaling():
    grid = FrequencyGrid.from_hz([10.0, 100.0, 1000.0])
    a = FrequencyResponse(grid, [1 + 1j, 2.0, -3j])
    b = FrequencyResponse(grid, 1.10 * a.values)
    result = compare_responses(a, b)
    assert result['max_mag_err_pct'] == pytest.approx(10.0, abs=1e-9)
    assert result['max_phase_err_deg'] == pytest.approx(0.0, abs=1e-9)


def test_compare_needs_same_grid():
    a = FrequencyResponse(FrequencyGrid.from_hz([10.0, 100.0]), [1.0, 1.0])
    b = FrequencyResponse(FrequencyGrid.from_hz([10.0, 200.0]), [1.0, 1.0])
    with pytest.raises(GridMismatch):
        compare_responses(a, b)


# ============================================================================
# Trace summary
# ============================================================================

def test_summary_tracks_growing_harmonic(cfg):
    sim = cfg.sim_config(schedule=[{'t_start_s': 0.0, 'va': 'proposed'},
                                   {'t_start_s': 0.1, 'va': 'conventional'}], t_end=0.2)
    t = np.arange(4000) / F_S
    i = 10.0 * np.exp(1j * 2 * np.pi * 60 * t)
    late = t >= 0.1
    i[late] += 0.1 * np.exp(20.0 * (t[late] - 0.1)) * np.exp(1j * 2 * np.pi * 350 * t[late])

    summary = summarize_trace(synthetic_trace(i), sim)
    first, second = summary['intervals']
    assert first['mode'] == 'proposed' and second['mode'] == 'conventional'
    assert first['harmonic_rms_a'] < 0.01
    assert second['harmonic_rms_a'] > 0.05
    assert second['growth_rate_per_s'] == pytest.approx(20.0, rel=0.15)
    assert second['dominant_hz'] == pytest.approx(350.0)
    assert summary['restabilized'] is None
    assert not summary['diverged']


# ============================================================================
# Frequency scan
# ============================================================================

def test_scan_rejects_guard_band():
    with pytest.raises(GuardBandViolation):
        ScanConfig(frequencies_hz=(100.0, 60.0), injection_amplitude=0.9)


def test_scan_config_measures_whole_cycles():
    scan = ScanConfig(frequencies_hz=(333.0,), injection_amplitude=0.9)
    cycles = scan.measure_s(333.0) * 333.0
    assert cycles == pytest.approx(round(cycles))
    assert scan.measure_s(333.0) >= scan.min_measure_s
    assert scan.settle_s(1000.0) == pytest.approx(0.1)


def test_empty_scan_is_a_no_op(cfg, caplog):
    scan = cfg.scan_config(frequencies=[])
    with caplog.at_level(logging.WARNING):
        result = frequency_scan(scan, cfg.sim_config())
    assert result.points == []
    assert result.max_mag_err_pct is None
    assert 'nothing to scan' in caplog.text


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv('GFMP_THREADS', '3')
    assert worker_count() == 3
    monkeypatch.setenv('GFMP_THREADS', 'many')
    with pytest.raises(InvalidRange):
        worker_count()
    monkeypatch.delenv('GFMP_THREADS')
    assert 1 <= worker_count() <= 4


@pytest.mark.slow
def test_scan_matches_analytic_impedance(cfg):
    freqs = [float(f) for f in np.geomspace(100, 1000, 4)]
    scan = cfg.scan_config(frequencies=freqs)
    sim = cfg.sim_config(schedule=[{'t_start_s': 0.0, 'va': 'proposed'}])
    result = frequency_scan(scan, sim, threads=2)
    assert [p.f_hz for p in result.points] == pytest.approx(freqs)
    assert result.unstable_hz == []
    assert result.max_mag_err_pct <= 5.0
    assert result.max_phase_err_deg <= 5.0
    frame = result.to_frame()
    assert len(frame) == 4 and set(frame['status']) == {'ok'}
    assert {'delay_mag_err_pct', 'delay_phase_err_deg'} <= set(frame.columns)


@pytest.mark.slow
def test_scan_agrees_with_delay_form_at_low_frequency(cfg):
    scan = cfg.scan_config(frequencies=[100.0])
    sim = cfg.sim_config(schedule=[{'t_start_s': 0.0, 'va': 'proposed'}])
    result = frequency_scan(scan, sim, threads=1)
    point = result.points[0]
    assert point.status == 'ok'
    assert point.delay_mag_err_pct <= 5.0
    assert point.delay_phase_err_deg <= 5.0
    report = result.to_dict()
    assert report['delay_max_phase_err_deg'] == pytest.approx(point.delay_phase_err_deg)
    assert report['delay_max_mag_err_pct'] == pytest.approx(point.delay_mag_err_pct)


@pytest.mark.slow
def test_windows_agree_on_injected_tone(cfg):
    sim = replace(cfg.sim_config(schedule=[{'t_start_s': 0.0, 'va': 'proposed'}], t_end=0.2),
                  dither_a=0.0, injection=Injection(330.0, 5.0, ramp_s=0.02))
    trace = simulator.run(sim)
    rect = fft_spectrum(trace, 'i', 'rectangular', 0.1, 0.2, min_cycles=6)
    hann = fft_spectrum(trace, 'i', 'hann', 0.1, 0.2, min_cycles=6)
    assert rect.dominant_harmonic_hz == pytest.approx(330.0, abs=rect.resolution_hz)
    assert abs(hann.dominant_harmonic_hz - rect.dominant_harmonic_hz) <= rect.resolution_hz


@pytest.mark.slow
def test_scan_is_linear_in_injection_amplitude(cfg):
    scan = cfg.scan_config(frequencies=[348.0])
    sim = cfg.sim_config(schedule=[{'t_start_s': 0.0, 'va': 'proposed'}])
    full = frequency_scan(scan, sim, threads=1).points[0]
    half = frequency_scan(replace(scan, injection_amplitude=scan.injection_amplitude / 2), sim, threads=1).points[0]
    assert full.status == half.status == 'ok'
    assert abs(half.z_measured - full.z_measured) < 0.01 * abs(full.z_measured)
