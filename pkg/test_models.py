import math

import numpy as np
import pytest

from errors import DegenerateDesign, InvalidRange
from models import (
    DesignPoint,
    GridParams,
    PlantParams,
    ProposedVaParams,
    VaParams,
    default_k_cc_p,
    default_k_cc_r,
    design_proposed_va,
    design_residual,
    gcc_pr,
    harmonic_asymptote,
    yv_conv,
    yv_prop,
    z_grid_at_pcc,
    zg_from_scr,
    zv_prop,
)


def test_conventional_admittance_at_dc():
    y = yv_conv(VaParams(0.754, 0.010))
    assert y(0j) == pytest.approx(1 / 0.754)


def test_conventional_admittance_at_fundamental(omega_1):
    y = yv_conv(VaParams(0.754, 0.010))
    assert 1 / y(1j * omega_1) == pytest.approx(complex(0.754, 3.7699), abs=1e-4)


@pytest.mark.parametrize("r_v, l_v", [(0.0, 0.01), (0.754, 0.0), (-1.0, 0.01), (float('inf'), 0.01)])
def test_conventional_params_validated(r_v, l_v):
    with pytest.raises(InvalidRange):
        VaParams(r_v, l_v)


def test_design_reproduces_table_values(omega_1):
    d = DesignPoint(r_v=0.754, x_v=omega_1 * 0.010, omega_1=omega_1, r_v_sigma=0.1885)
    p = design_proposed_va(d)
    assert p.r_v_pi == pytest.approx(25.698, abs=0.005)
    assert p.l_v0 == pytest.approx(10.225e-3, rel=1e-3)
    assert design_residual(d, p) < 1e-9


def test_design_identity_random(rng, omega_1):
    for _ in range(100):
        r_v = rng.uniform(0.1, 5)
        d = DesignPoint(r_v=r_v, x_v=rng.uniform(0.5, 10), omega_1=omega_1,
                        r_v_sigma=rng.uniform(0, 0.95) * r_v)
        p = design_proposed_va(d)
        assert design_residual(d, p) < 1e-9 * max(1.0, abs(complex(d.r_v, d.x_v)))


@pytest.mark.parametrize("r_v_sigma", [0.754, 1.0])
def test_design_rejects_sigma_not_below_r_v(omega_1, r_v_sigma):
    with pytest.raises(DegenerateDesign):
        design_proposed_va(DesignPoint(0.754, 3.77, omega_1, r_v_sigma))


@pytest.mark.parametrize("r_v_sigma", [0.754, -0.1])
def test_design_point_checked_at_construction(omega_1, r_v_sigma):
    with pytest.raises(DegenerateDesign):
        DesignPoint(0.754, 3.77, omega_1, r_v_sigma)


def test_design_rejects_non_inductive(omega_1):
    with pytest.raises(DegenerateDesign):
        design_proposed_va(DesignPoint(0.754, 0.0, omega_1, 0.1885))


def test_proposed_admittance_matches_impedance(va_prop, rng):
    y, z = yv_prop(va_prop), zv_prop(va_prop)
    for w in rng.uniform(1, 1e5, 20):
        assert y(1j * w) * z(1j * w) == pytest.approx(1.0)


def test_harmonic_asymptote(va_prop):
    assert harmonic_asymptote(va_prop) == pytest.approx(0.1885 + 25.698, abs=0.005)
    z_far = 1 / yv_prop(va_prop)(1j * 2 * math.pi * 1e7)
    assert z_far.real == pytest.approx(harmonic_asymptote(va_prop), rel=1e-4)
    assert abs(z_far.imag) < 0.01 * abs(z_far)


def test_proposed_sigma_may_be_zero():
    ProposedVaParams(0.0, 25.0, 0.01)


def test_tuning_rules(omega_1):
    k = default_k_cc_p(3.4e-3, 2 * math.pi * 500)
    assert k == pytest.approx(10.681, abs=1e-3)
    assert default_k_cc_r(k, omega_1) == pytest.approx(k * omega_1 / 20)


def test_pr_controller_shape(controller):
    g = gcc_pr(controller)
    w1 = controller.omega_1
    assert g(1j * 2 * math.pi * 5000) == pytest.approx(controller.k_cc_p, rel=0.01)
    assert abs(g(1j * w1 * (1 + 1e-6))) > 1e3 * controller.k_cc_p


def test_grid_from_scr():
    g = GridParams(v_g_ll_rms=220, p_rated=3000, scr=4, xr_ratio=4)
    filled, elem = zg_from_scr(g, 2 * math.pi * 60)
    assert filled.resolved and not g.resolved
    assert filled.r_g == pytest.approx(0.9782, abs=1e-4)
    assert filled.l_g == pytest.approx(10.379e-3, rel=1e-3)
    z = elem(1j * 2 * math.pi * 60)
    assert abs(z) == pytest.approx(220 ** 2 / (4 * 3000))
    assert z.imag / z.real == pytest.approx(4.0)


def test_grid_base_quantities(grid_params):
    assert grid_params.e_peak == pytest.approx(179.63, abs=0.01)
    assert grid_params.i_rated_peak == pytest.approx(11.13, abs=0.01)


def test_pcc_impedance_with_capacitor(grid_params, plant):
    z = z_grid_at_pcc(grid_params, plant)
    w = 2 * math.pi * 300
    zg = complex(grid_params.r_g, w * grid_params.l_g)
    expected = 1 / (1 / zg + 1j * w * plant.c_f)
    assert z(1j * w) == pytest.approx(expected)


def test_pcc_impedance_without_capacitor(grid_params, plant):
    z = z_grid_at_pcc(grid_params, plant, include_capacitor=False)
    w = 2 * math.pi * 300
    assert z(1j * w) == pytest.approx(complex(grid_params.r_g, w * grid_params.l_g))


def test_plant_voltage_limit():
    assert PlantParams(3.4e-3, 30e-6, 400).v_cmd_limit == pytest.approx(230.94, abs=0.01)
    assert PlantParams(3.4e-3, 0.0).v_cmd_limit is None


def test_controller_delay_toggle(controller):
    assert controller.with_delay(True).t_d == pytest.approx(75e-6)
    assert controller.with_delay(False).t_d == 0.0
    assert controller.t_s == pytest.approx(50e-6)
    assert np.isclose(controller.f_1, 60.0)


def test_conventional_admittance_example(omega_1):
    y = yv_conv(VaParams(0.754, 0.010))(1j * omega_1)
    assert y == pytest.approx(complex(0.05102, -0.25510), abs=1e-5)


def test_conventional_real_part_is_flat(va_conv):
    w = np.geomspace(1, 1e5, 50)
    z = 1 / yv_conv(va_conv).response(1j * w)
    np.testing.assert_allclose(z.real, va_conv.r_v, rtol=1e-9)


def test_proposed_real_part_rises_to_asymptote(va_prop):
    w = np.geomspace(1, 1e6, 400)
    re = (1 / yv_prop(va_prop).response(1j * w)).real
    assert np.all(np.diff(re) >= -1e-12)
    assert re[0] >= va_prop.r_v_sigma - 1e-12
    assert re[-1] <= harmonic_asymptote(va_prop) + 1e-12


def test_proposed_admittance_limits(va_prop):
    assert yv_prop(va_prop)(0j) == pytest.approx(1 / va_prop.r_v_sigma)
    z_3k = abs(1 / yv_prop(va_prop)(1j * 2 * math.pi * 3000))
    assert z_3k == pytest.approx(harmonic_asymptote(va_prop), rel=0.02)


def test_design_unit_values():
    p = design_proposed_va(DesignPoint(r_v=2.0, x_v=1.0, omega_1=1.0, r_v_sigma=1.0))
    assert p.l_v0 == pytest.approx(2.0)
    assert p.r_v_pi == pytest.approx(2.0)


def test_asymptote_without_series_resistance():
    assert harmonic_asymptote(ProposedVaParams(0.0, 25.0, 0.01)) == pytest.approx(25.0)


def test_pr_controller_away_from_resonance(controller):
    g = gcc_pr(controller)
    assert g(0j) == pytest.approx(controller.k_cc_p)
    assert abs(g(1j * 2 * math.pi * 1000)) == pytest.approx(controller.k_cc_p, rel=0.05)


def test_grid_scaling_with_scr(omega_1):
    weak, _ = zg_from_scr(GridParams(v_g_ll_rms=220, p_rated=3000, scr=4, xr_ratio=4), omega_1)
    strong, _ = zg_from_scr(GridParams(v_g_ll_rms=220, p_rated=3000, scr=8, xr_ratio=4), omega_1)
    assert strong.r_g == pytest.approx(weak.r_g / 2)
    assert strong.l_g == pytest.approx(weak.l_g / 2)
    mag = math.hypot(weak.r_g, omega_1 * weak.l_g)
    assert mag * 4 * 3000 == pytest.approx(220 ** 2, rel=1e-9)
