"""
Component models of the VA-CC grid-forming inverter.

Parameter sets for the plant, grid, current controller and the two virtual
admittances, plus the constructors that turn them into transfer elements.
All quantities are SI.
"""

import math
from dataclasses import dataclass, replace

from errors import DegenerateDesign, InvalidRange
from tfcore import RationalElement


def _require(condition, message):
    if not condition:
        raise InvalidRange(message)


def _finite(*values):
    return all(isinstance(v, (int, float)) and math.isfinite(v) for v in values)


# ============================================================================
# Parameter sets
# ============================================================================

@dataclass(frozen=True)
class VaParams:
    """Conventional series R-L virtual admittance (R_v + sL_v)^-1."""

    r_v: float
    l_v: float

    def __post_init__(self):
        _require(_finite(self.r_v, self.l_v), "VA parameters must be finite")
        _require(self.r_v > 0, f"r_v must be > 0, got {self.r_v}")
        _require(self.l_v > 0, f"l_v must be > 0, got {self.l_v}")


@dataclass(frozen=True)
class ProposedVaParams:
    """
    Series resistor R_vσ followed by the parallel pair R_vπ ‖ L_v0.

    The parallel resistor takes over the inductor at high frequency, so the
    virtual impedance turns resistive in the harmonic range.
    """

    r_v_sigma: float
    r_v_pi: float
    l_v0: float

    def __post_init__(self):
        _require(_finite(self.r_v_sigma, self.r_v_pi, self.l_v0), "VA parameters must be finite")
        _require(self.r_v_sigma >= 0, f"r_v_sigma must be >= 0, got {self.r_v_sigma}")
        _require(self.r_v_pi > 0, f"r_v_pi must be > 0, got {self.r_v_pi}")
        _require(self.l_v0 > 0, f"l_v0 must be > 0, got {self.l_v0}")


@dataclass(frozen=True)
class DesignPoint:
    """Target R_v + jX_v at ω_1 and the chosen series split R_vσ."""

    r_v: float
    x_v: float
    omega_1: float
    r_v_sigma: float

    def __post_init__(self):
        _require(_finite(self.r_v, self.x_v, self.omega_1, self.r_v_sigma),
                 "design point values must be finite")
        if self.x_v <= 0:
            raise DegenerateDesign(f"x_v must be > 0, got {self.x_v}")
        if self.omega_1 <= 0:
            raise DegenerateDesign(f"omega_1 must be > 0, got {self.omega_1}")
        if self.r_v_sigma < 0:
            raise DegenerateDesign(f"r_v_sigma must be >= 0, got {self.r_v_sigma}")
        if self.r_v_sigma >= self.r_v:
            raise DegenerateDesign(
                f"r_v_sigma ({self.r_v_sigma}) must be strictly below r_v ({self.r_v}); "
                f"the parallel branch would need infinite resistance"
            )


@dataclass(frozen=True)
class ControllerParams:
    """PR current controller, sampling and the lumped control delay."""

    k_cc_p: float
    k_cc_r: float
    omega_1: float
    omega_cc: float
    t_d: float
    f_s: float

    def __post_init__(self):
        _require(_finite(self.k_cc_p, self.k_cc_r, self.omega_1, self.omega_cc, self.t_d, self.f_s),
                 "controller parameters must be finite")
        _require(self.k_cc_p > 0, f"k_cc_p must be > 0, got {self.k_cc_p}")
        _require(self.k_cc_r >= 0, f"k_cc_r must be >= 0, got {self.k_cc_r}")
        _require(self.omega_1 > 0, f"omega_1 must be > 0, got {self.omega_1}")
        _require(self.omega_cc > 0, f"omega_cc must be > 0, got {self.omega_cc}")
        _require(self.t_d >= 0, f"t_d must be >= 0, got {self.t_d}")
        _require(self.f_s > 0, f"f_s must be > 0, got {self.f_s}")

    @property
    def t_s(self):
        return 1.0 / self.f_s

    @property
    def f_1(self):
        return self.omega_1 / (2 * math.pi)

    @property
    def nyquist_hz(self):
        return self.f_s / 2

    def with_delay(self, enabled=True):
        """Copy with t_d = 1.5/f_s (enabled) or 0."""
        return replace(self, t_d=1.5 / self.f_s if enabled else 0.0)

    def with_gain(self, k_cc_p):
        return replace(self, k_cc_p=k_cc_p)


@dataclass(frozen=True)
class PlantParams:
    l_f: float
    c_f: float
    v_dc: float = None

    def __post_init__(self):
        _require(_finite(self.l_f, self.c_f), "plant parameters must be finite")
        _require(self.l_f > 0, f"l_f must be > 0, got {self.l_f}")
        _require(self.c_f >= 0, f"c_f must be >= 0, got {self.c_f}")
        if self.v_dc is not None:
            _require(_finite(self.v_dc) and self.v_dc > 0, f"v_dc must be > 0, got {self.v_dc}")

    @property
    def v_cmd_limit(self):
        """Largest αβ command magnitude the DC link supports, or None."""
        return self.v_dc / math.sqrt(3) if self.v_dc is not None else None


@dataclass(frozen=True)
class GridParams:
    """
    Grid Thevenin source. r_g and l_g stay None until zg_from_scr fills
    them from SCR and X/R, unless given explicitly.
    """

    v_g_ll_rms: float
    p_rated: float
    scr: float
    xr_ratio: float
    r_g: float = None
    l_g: float = None

    def __post_init__(self):
        _require(_finite(self.v_g_ll_rms, self.p_rated, self.scr, self.xr_ratio),
                 "grid parameters must be finite")
        _require(self.v_g_ll_rms > 0, f"v_g_ll_rms must be > 0, got {self.v_g_ll_rms}")
        _require(self.p_rated > 0, f"p_rated must be > 0, got {self.p_rated}")
        _require(self.scr > 0, f"scr must be > 0, got {self.scr}")
        _require(self.xr_ratio > 0, f"xr_ratio must be > 0, got {self.xr_ratio}")
        if self.r_g is not None:
            _require(_finite(self.r_g) and self.r_g >= 0, f"r_g must be >= 0, got {self.r_g}")
        if self.l_g is not None:
            _require(_finite(self.l_g) and self.l_g >= 0, f"l_g must be >= 0, got {self.l_g}")

    @property
    def e_peak(self):
        """Phase peak of the grid EMF (amplitude-invariant αβ magnitude)."""
        return self.v_g_ll_rms * math.sqrt(2.0 / 3.0)

    @property
    def z_base(self):
        return self.v_g_ll_rms ** 2 / self.p_rated

    @property
    def i_rated_peak(self):
        return 2.0 * self.p_rated / (3.0 * self.e_peak)

    @property
    def resolved(self):
        return self.r_g is not None and self.l_g is not None


# ============================================================================
# Tuning rules
# ============================================================================

def default_k_cc_p(l_f, omega_cc):
    """Bandwidth tuning: K_cc,p = ω_cc·L_f."""
    return omega_cc * l_f


def default_k_cc_r(k_cc_p, omega_1):
    """
    Resonant gain K_cc,p·ω_1/20.

    Keeps the resonant term below 2% of K_cc,p from 200 Hz upward at 60 Hz.
    """
    return k_cc_p * omega_1 / 20.0


# ============================================================================
# Transfer elements
# ============================================================================

def yv_conv(p):
    """(R_v + sL_v)^-1"""
    return RationalElement([1.0], [p.r_v, p.l_v])


def zv_conv(p):
    return RationalElement([p.r_v, p.l_v], [1.0])


def zv_prop(p):
    """R_vσ + sR_vπL_v0/(R_vπ + sL_v0), as one rational."""
    num = [p.r_v_sigma * p.r_v_pi, p.l_v0 * (p.r_v_sigma + p.r_v_pi)]
    den = [p.r_v_pi, p.l_v0]
    return RationalElement(num, den)


def yv_prop(p):
    num = [p.r_v_pi, p.l_v0]
    den = [p.r_v_sigma * p.r_v_pi, p.l_v0 * (p.r_v_sigma + p.r_v_pi)]
    return RationalElement(num, den)


def va_element(va):
    """Admittance element for either parameter set."""
    if isinstance(va, VaParams):
        return yv_conv(va)
    if isinstance(va, ProposedVaParams):
        return yv_prop(va)
    raise TypeError(f"unsupported VA parameter set: {type(va).__name__}")


def va_impedance_element(va):
    if isinstance(va, VaParams):
        return zv_conv(va)
    if isinstance(va, ProposedVaParams):
        return zv_prop(va)
    raise TypeError(f"unsupported VA parameter set: {type(va).__name__}")


def design_proposed_va(d):
    """
    Split the design impedance R_v + jX_v into R_vσ + (R_vπ ‖ jω_1L_v0).

    Args:
        d: DesignPoint

    Returns:
        ProposedVaParams whose impedance equals R_v + jX_v at ω_1

    The DesignPoint itself guarantees 0 <= r_v_sigma < r_v, x_v > 0 and
    omega_1 > 0.
    """
    r_par = d.r_v - d.r_v_sigma
    m = d.x_v ** 2 + r_par ** 2
    return ProposedVaParams(
        r_v_sigma=d.r_v_sigma,
        r_v_pi=m / r_par,
        l_v0=m / (d.omega_1 * d.x_v),
    )


def design_residual(d, p):
    """|Z_v,prop(jω_1) − (R_v + jX_v)| in ohms."""
    z = zv_prop(p)(1j * d.omega_1)
    return abs(z - complex(d.r_v, d.x_v))


def harmonic_asymptote(p):
    """High-frequency limit of the proposed virtual impedance, R_vσ + R_vπ."""
    return p.r_v_sigma + p.r_v_pi


def gcc_pr(c):
    """K_cc,p + K_cc,r·s/(s² + ω_1²)"""
    w2 = c.omega_1 ** 2
    num = [c.k_cc_p * w2, c.k_cc_r, c.k_cc_p]
    den = [w2, 0.0, 1.0]
    return RationalElement(num, den)


def zg_from_scr(g, omega_1):
    """
    Fill r_g, l_g from SCR and X/R: |Z_g| = V_g²/(SCR·P_rated).

    Returns:
        (GridParams with r_g and l_g set, element r_g + s·l_g)
    """
    z_mag = g.v_g_ll_rms ** 2 / (g.scr * g.p_rated)
    r_g = z_mag / math.sqrt(1.0 + g.xr_ratio ** 2)
    l_g = g.xr_ratio * r_g / omega_1
    filled = replace(g, r_g=r_g, l_g=l_g)
    return filled, zg_element(filled)


def resolve_grid(g, omega_1):
    """Grid with r_g and l_g set, keeping explicit values."""
    if g.resolved:
        return g
    filled, _ = zg_from_scr(g, omega_1)
    return filled


def zg_element(g):
    _require(g.resolved, "grid r_g/l_g unresolved; call zg_from_scr first")
    return RationalElement([g.r_g, g.l_g], [1.0])


def z_grid_at_pcc(g, p, include_capacitor=True):
    """
    Impedance seen from the inverter inductor into the PCC node:
    (R_g + sL_g) ‖ 1/(sC_f), or the bare grid branch.
    """
    _require(g.resolved, "grid r_g/l_g unresolved; call zg_from_scr first")
    if not include_capacitor or p.c_f == 0:
        return zg_element(g)
    # (r + sl) / (1 + s·c·r + s²·c·l)
    num = [g.r_g, g.l_g]
    den = [1.0, p.c_f * g.r_g, p.c_f * g.l_g]
    return RationalElement(num, den)
