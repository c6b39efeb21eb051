import math
from collections import deque
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import simulator
from errors import DivergenceDetected, FileFormatError, InvalidRange
from impedance import return_ratio_assessment, z_eq_delay
from measurement import fft_spectrum, spectrum, summarize_trace
from models import GridParams, PlantParams, VaParams, yv_conv, z_grid_at_pcc
from simulator import (
    TRACE_COLUMNS,
    Controller,
    ControllerState,
    DiscreteFilter,
    Injection,
    PlantState,
    ScheduleEntry,
    SimTrace,
    plant_model,
    plant_step,
    steady_state_operating_point,
)


def _rms(x):
    return float(np.sqrt(np.mean(np.abs(x) ** 2)))


def _schedule(mode):
    return [{'t_start_s': 0.0, 'va': mode}]


# ============================================================================
# Plant
# ============================================================================

def test_lossless_lc_conserves_energy():
    p = PlantParams(l_f=3.4e-3, c_f=30e-6)
    g = GridParams(v_g_ll_rms=220, p_rated=3000, scr=4, xr_ratio=4, r_g=0.0, l_g=1e-3)
    state = PlantState(i_f=5.0 + 1j, v_c=-20.0 + 40j, i_g=-2.0 + 0.5j)
    model = plant_model(p, g)
    e0 = model.energy(model.to_vector(state))
    for _ in range(2000):
        state = plant_step(state, 0j, 0j, 5e-6, p, g)
    assert model.energy(model.to_vector(state)) == pytest.approx(e0, rel=1e-8)


def test_rl_step_matches_exponential():
    p = PlantParams(l_f=3.4e-3, c_f=0.0)
    g = GridParams(v_g_ll_rms=220, p_rated=3000, scr=4, xr_ratio=4, r_g=1.0, l_g=6.6e-3)
    dt = 1e-3
    state = plant_step(PlantState(0j, 0j, 0j), 10.0, 0.0, dt, p, g)
    tau = (p.l_f + g.l_g) / g.r_g
    assert state.i_f == pytest.approx(10.0 * (1 - math.exp(-dt / tau)), rel=1e-9)
    assert state.i_g == state.i_f


def test_plant_stays_on_periodic_orbit(plant, grid_params):
    w1 = 2 * math.pi * 60
    n = 3000
    dt = 1.0 / (60.0 * n)
    model = plant_model(plant, grid_params)
    phi, gamma = model.discretize(dt)
    z = np.exp(1j * w1 * dt)
    # inputs held at their mid-step values
    u = np.array([1.05 * grid_params.e_peak * np.exp(0.05j), grid_params.e_peak]) * np.exp(0.5j * w1 * dt)
    x0 = np.linalg.solve(z * np.eye(3) - phi, gamma @ u)

    phasor = np.linalg.solve(1j * w1 * np.eye(3) - model.a, model.b @ (u / np.exp(0.5j * w1 * dt)))
    np.testing.assert_allclose(x0, phasor, rtol=1e-4)

    state = PlantState(*x0)
    for k in range(n):
        v_o, emf = u * z ** k
        state = plant_step(state, v_o, emf, dt, plant, grid_params)
    x_n = model.to_vector(state)
    assert np.max(np.abs(x_n - x0)) < 1e-6 * np.max(np.abs(x0))


def test_zoh_cache_is_bounded(plant, grid_params):
    model = simulator.PlantModel(plant, grid_params)
    for k in range(3 * simulator.ZOH_CACHE_SIZE):
        model.discretize(1e-6 * (k + 1))
    assert len(model._zoh_cache) == simulator.ZOH_CACHE_SIZE
    phi, _ = model.discretize(1e-6)
    np.testing.assert_allclose(phi, simulator.PlantModel(plant, grid_params).discretize(1e-6)[0])


def test_capacitor_needs_grid_inductance():
    p = PlantParams(l_f=3.4e-3, c_f=30e-6)
    g = GridParams(v_g_ll_rms=220, p_rated=3000, scr=4, xr_ratio=4, r_g=1.0, l_g=0.0)
    with pytest.raises(InvalidRange):
        plant_step(PlantState(0j, 0j, 0j), 0j, 0j, 1e-6, p, g)


# ============================================================================
# Discrete filters
# ============================================================================

def test_prewarped_filter_exact_at_fundamental(va_conv, controller):
    w1 = controller.omega_1
    f = DiscreteFilter.from_element(yv_conv(va_conv), w1, controller.t_s)
    z0 = np.exp(1j * w1 * controller.t_s)
    assert f.response(z0) == pytest.approx(yv_conv(va_conv)(1j * w1), rel=1e-9)


def test_warm_start_gives_rotating_steady_state(va_prop, controller):
    w1 = controller.omega_1
    f = simulator.Controller.make_va_filter(va_prop, controller)
    z0 = np.exp(1j * w1 * controller.t_s)
    u0 = 3.0 - 2.0j
    y0 = f.response(z0) * u0
    f.warm_start(u0, y0, z0)
    for k in range(20):
        assert f.step(u0 * z0 ** k) == pytest.approx(y0 * z0 ** k, rel=1e-9)


# ============================================================================
# Configuration types
# ============================================================================

def test_schedule_entry_checks_parameter_type(va_prop):
    with pytest.raises(InvalidRange):
        ScheduleEntry(0.0, 'conventional', va_prop)
    with pytest.raises(InvalidRange):
        ScheduleEntry(0.0, 'virtual', va_prop)


def test_sim_config_validation(cfg):
    sim = cfg.sim_config()
    with pytest.raises(InvalidRange):
        replace(sim, plant_substeps=5)
    with pytest.raises(InvalidRange):
        replace(sim, va_schedule=sim.va_schedule[1:])
    with pytest.raises(InvalidRange):
        replace(sim, t_end=0.0)


def test_mode_at(cfg):
    sim = cfg.sim_config()
    assert sim.mode_at(0.0).va_mode == 'proposed'
    assert sim.mode_at(0.45).va_mode == 'conventional'
    assert sim.mode_at(0.5).va_mode == 'proposed'


def test_droop_filter_time_constant(cfg, va_prop):
    sim = cfg.sim_config(schedule=_schedule('proposed'))
    c = sim.controller
    state = ControllerState(
        ivs_phase=0.0,
        ivs_magnitude=sim.ivs_magnitude_0,
        va_filter=Controller.make_va_filter(va_prop, c),
        pr=Controller.make_pr_filter(c),
        delay_line=deque([0j], maxlen=1),
    )
    ctl = Controller(sim, state)
    tau = 1.0 / sim.droop.omega_p_si
    assert tau == pytest.approx(0.0265, abs=1e-4)

    for _ in range(int(round(tau / c.t_s))):
        _, mag = ctl.droop_update(sim.p_ref - 1000.0, sim.q_ref)
    fraction = (state.omega - c.omega_1) / (ctl.k_p_si * 1000.0)
    assert fraction == pytest.approx(1.0 - math.exp(-1.0), abs=1e-3)
    assert mag == sim.ivs_magnitude_0


def test_injection_ramp():
    inj = Injection(300.0, 2.0, ramp_s=0.01)
    assert inj(0.0) == pytest.approx(0.0)
    assert abs(inj(0.005)) == pytest.approx(1.0)
    assert abs(inj(0.02)) == pytest.approx(2.0)


def test_operating_point_meets_power_reference(cfg):
    sim = cfg.sim_config(schedule=_schedule('proposed'))
    op = steady_state_operating_point(sim)
    assert op['p'] == pytest.approx(sim.p_ref, rel=1e-6)
    assert abs(op['v']) == pytest.approx(sim.grid.e_peak, rel=0.1)


# ============================================================================
# Closed loop
# ============================================================================

def test_proposed_run_holds_power(cfg):
    sim = cfg.sim_config(schedule=_schedule('proposed'), t_end=0.1)
    trace = simulator.run(sim)
    assert trace.diverged_at is None
    assert len(trace) == 2000
    assert np.mean(trace.p[-400:]) == pytest.approx(2000.0, rel=0.02)
    assert set(trace.va_mode) == {'proposed'}
    assert not summarize_trace(trace, sim)['flagged']


def test_halving_plant_step_barely_changes_the_trace(cfg):
    sim = cfg.sim_config(schedule=_schedule('proposed'), t_end=0.1)
    coarse = simulator.run(sim)
    fine = simulator.run(replace(sim, plant_substeps=2 * sim.plant_substeps))
    tail = coarse.t >= 0.08
    assert _rms(coarse.i[tail] - fine.i[tail]) < 1e-3 * _rms(coarse.i[tail])
    assert _rms(coarse.v_pcc[tail] - fine.v_pcc[tail]) < 1e-3 * _rms(coarse.v_pcc[tail])


def test_zero_sources_give_zero_trace(cfg):
    sim = replace(cfg.sim_config(schedule=_schedule('proposed'), t_end=0.02),
                  grid_emf_scale=0.0, p_ref=0.0, q_ref=0.0, e0=0.0, initial='zero', dither_a=0.0)
    trace = simulator.run(sim)
    assert len(trace) == 400
    for channel in (trace.i, trace.v_pcc, trace.e, trace.i_ref, trace.v_cmd, trace.p, trace.q):
        assert np.all(channel == 0)


@pytest.mark.slow
def test_current_loop_tracks_rotating_reference(cfg):
    # a DC reference in the rotating frame is a 60 Hz vector in αβ
    w1 = 2 * math.pi * 60

    def ref(t):
        return 5.0 * np.exp(1j * w1 * t)

    sim = replace(cfg.sim_config(schedule=_schedule('proposed'), t_end=0.6),
                  i_ref_override=ref, dither_a=0.0)
    trace = simulator.run(sim)
    assert trace.diverged_at is None
    tail = trace.t >= 0.55
    assert np.max(np.abs(trace.i[tail] - ref(trace.t[tail]))) <= 0.02 * 5.0


def test_runs_are_deterministic(cfg):
    sim = cfg.sim_config(schedule=_schedule('proposed'), t_end=0.02)
    a = simulator.run(sim)
    b = simulator.run(sim)
    np.testing.assert_array_equal(a.i, b.i)
    np.testing.assert_array_equal(a.v_pcc, b.v_pcc)


def test_i_ref_override_is_recorded(cfg):
    w1 = 2 * math.pi * 60

    def ref(t):
        return 5.0 * np.exp(1j * w1 * t)

    sim = replace(cfg.sim_config(schedule=_schedule('proposed'), t_end=0.01), i_ref_override=ref)
    trace = simulator.run(sim)
    np.testing.assert_allclose(trace.i_ref, ref(trace.t))


def test_trace_frame_round_trip(cfg):
    trace = simulator.run(cfg.sim_config(schedule=_schedule('proposed'), t_end=0.01))
    df = trace.to_frame()
    assert list(df.columns) == TRACE_COLUMNS
    back = SimTrace.from_frame(df)
    np.testing.assert_allclose(back.i, trace.i)
    assert back.f_s == pytest.approx(trace.f_s)


def test_trace_from_frame_rejects_bad_files():
    with pytest.raises(FileFormatError):
        SimTrace.from_frame(pd.DataFrame({'t_s': [0.0, 1.0]}))
    df = pd.DataFrame({c: [0.0, 0.0, 0.0] for c in TRACE_COLUMNS})
    df['t_s'] = [0.0, 1.0, 3.0]
    df['va_mode'] = 'proposed'
    with pytest.raises(FileFormatError):
        SimTrace.from_frame(df)


@pytest.mark.slow
def test_conventional_diverges_without_saturation(cfg):
    sim = replace(cfg.sim_config(schedule=_schedule('conventional'), t_end=0.3), saturate=False)
    trace = simulator.run(sim)
    assert trace.diverged_at is not None
    summary = summarize_trace(trace, sim)
    assert summary['flagged'] and not summary['sustained_oscillation']

    freqs, _, k_dom, _ = spectrum(trace.i[-1000:].real, trace.f_s, window='hann')
    assert freqs[k_dom] == pytest.approx(350.0, rel=0.10)


@pytest.mark.slow
def test_saturated_conventional_run_is_flagged(cfg):
    sim = cfg.sim_config(schedule=_schedule('conventional'), t_end=0.5)
    assert sim.saturate
    trace = simulator.run(sim)
    assert trace.diverged_at is None

    summary = summarize_trace(trace, sim)
    assert summary['sustained_oscillation']
    assert summary['flagged']
    assert summary['intervals'][0]['oscillating']
    assert summary['intervals'][0]['harmonic_rms_a'] > sim.oscillation_threshold_a


def test_divergence_can_raise(cfg):
    sim = replace(cfg.sim_config(schedule=_schedule('conventional'), t_end=0.05),
                  saturate=False, divergence_factor=0.01)
    with pytest.raises(DivergenceDetected) as exc:
        simulator.run(sim, raise_on_divergence=True)
    assert exc.value.trace is not None
    assert len(exc.value.trace) < 1000
    assert exc.value.t == exc.value.trace.diverged_at


@pytest.mark.slow
def test_mode_transition_experiment(cfg):
    sim = cfg.sim_config()
    trace = simulator.run(sim)
    assert trace.diverged_at is None

    summary = summarize_trace(trace, sim)
    first, conv = summary['intervals'][0], summary['intervals'][1]
    assert conv['mode'] == 'conventional'
    assert conv['harmonic_rms_a'] > first['harmonic_rms_a']
    assert conv['growth_rate_per_s'] > 0

    zeq = z_eq_delay(yv_conv(VaParams(0.754, 0.010)), sim.controller, sim.plant)
    a = return_ratio_assessment(zeq, z_grid_at_pcc(sim.grid, sim.plant), cfg.analysis_grid())
    report = fft_spectrum(trace, 'i', 'hann', 0.4, 0.5, min_cycles=6)
    predicted = min(a.gain_crossover_hz, key=lambda f: abs(f - report.dominant_harmonic_hz))
    assert report.dominant_harmonic_hz == pytest.approx(predicted, rel=0.10)
