"""
Sampled-data simulation of the grid-forming inverter.

Droop outer loops set the internal voltage source (IVS); the virtual
admittance turns e - v_pcc into a current reference; the PR current
controller with voltage feedforward produces the inverter voltage, which
reaches the plant one control period later. The plant (L_f, C_f, grid
R-L branch and grid EMF) is advanced by exact zero-order-hold steps.

Three-phase quantities are amplitude-invariant αβ complex vectors.
"""

import logging
import math
import time
from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import optimize, signal

from errors import DivergenceDetected, FileFormatError, InvalidRange, NumericError
from models import PlantParams, ProposedVaParams, VaParams, gcc_pr, va_element

logger = logging.getLogger(__name__)

VA_MODES = ('conventional', 'proposed')

# Commands reach the plant one control period after they are computed;
# the half-period of the PWM hold only appears in the analytic T_d.
COMPUTATION_DELAY_SAMPLES = 1

# Distinct step lengths whose ZOH matrices a plant model keeps
ZOH_CACHE_SIZE = 8

TRACE_COLUMNS = [
    't_s', 'e_alpha', 'e_beta', 'vpcc_alpha', 'vpcc_beta', 'i_alpha', 'i_beta',
    'iref_alpha', 'iref_beta', 'p_w', 'q_var', 'va_mode',
]


# ============================================================================
# Configuration types
# ============================================================================

@dataclass(frozen=True)
class DroopParams:
    """
    Per-unit droop gains and LPF cutoffs with their bases.

    Δω = k_p·ω_base·ΔP/s_base and ΔE = k_q·E_base·ΔQ/s_base, where
    E_base is the phase peak of v_base.
    """

    k_p: float
    k_q: float
    omega_p: float
    omega_q: float
    s_base: float
    v_base: float
    omega_base: float

    def __post_init__(self):
        for name in ('k_p', 'k_q'):
            if not getattr(self, name) >= 0:
                raise InvalidRange(f"droop {name} must be >= 0")
        for name in ('omega_p', 'omega_q', 's_base', 'v_base', 'omega_base'):
            if not getattr(self, name) > 0:
                raise InvalidRange(f"droop {name} must be > 0")

    @property
    def e_base(self):
        return self.v_base * math.sqrt(2.0 / 3.0)

    @property
    def k_p_si(self):
        """rad/s per W"""
        return self.k_p * self.omega_base / self.s_base

    @property
    def k_q_si(self):
        """V (peak) per var"""
        return self.k_q * self.e_base / self.s_base

    @property
    def omega_p_si(self):
        return self.omega_p * self.omega_base

    @property
    def omega_q_si(self):
        return self.omega_q * self.omega_base


@dataclass(frozen=True)
class ScheduleEntry:
    t_start: float
    va_mode: str
    va_params: object

    def __post_init__(self):
        if self.va_mode not in VA_MODES:
            raise InvalidRange(f"unknown VA mode '{self.va_mode}', expected one of {VA_MODES}")
        expected = VaParams if self.va_mode == 'conventional' else ProposedVaParams
        if not isinstance(self.va_params, expected):
            raise InvalidRange(f"VA mode '{self.va_mode}' needs {expected.__name__}")


@dataclass(frozen=True)
class Injection:
    """
    Positive-sequence series EMF A·e^{j2πft} in the grid branch, faded in
    with a raised-cosine ramp over ramp_s.
    """

    f_hz: float
    amplitude_v: float
    ramp_s: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        wave = self.amplitude_v * np.exp(1j * 2 * np.pi * self.f_hz * t)
        if self.ramp_s > 0:
            ramp = np.where(t < self.ramp_s, 0.5 * (1 - np.cos(np.pi * np.clip(t, 0, None) / self.ramp_s)), 1.0)
            wave = wave * ramp
        return wave


@dataclass(frozen=True)
class SimConfig:
    plant: PlantParams
    grid: object
    controller: object
    va_schedule: tuple
    droop: DroopParams
    p_ref: float
    q_ref: float
    t_end: float
    plant_substeps: int = 10
    seed: int = None
    dither_a: float = 0.0
    saturate: bool = True
    e0: float = None
    grid_emf_scale: float = 1.0
    initial: str = 'steady'
    injection: Injection = None
    i_ref_override: object = None
    divergence_factor: float = 50.0
    oscillation_fraction: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, 'va_schedule', tuple(self.va_schedule))
        if not self.va_schedule:
            raise InvalidRange("VA schedule is empty")
        if self.va_schedule[0].t_start != 0:
            raise InvalidRange("the first schedule entry must start at t = 0")
        starts = [entry.t_start for entry in self.va_schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise InvalidRange(f"schedule times must be strictly ascending, got {starts}")
        if not self.t_end > 0:
            raise InvalidRange(f"t_end must be > 0, got {self.t_end}")
        if int(self.plant_substeps) != self.plant_substeps or self.plant_substeps < 10:
            raise InvalidRange(f"plant_substeps must be an integer >= 10, got {self.plant_substeps}")
        if not self.grid.resolved:
            raise InvalidRange("grid r_g/l_g must be resolved before simulating")
        if self.initial not in ('steady', 'zero'):
            raise InvalidRange(f"initial must be 'steady' or 'zero', got '{self.initial}'")
        if self.dither_a < 0:
            raise InvalidRange(f"dither_a must be >= 0, got {self.dither_a}")
        if not self.oscillation_fraction > 0:
            raise InvalidRange(f"oscillation_fraction must be > 0, got {self.oscillation_fraction}")

    @property
    def t_s(self):
        return self.controller.t_s

    @property
    def emf_peak(self):
        return self.grid.e_peak * self.grid_emf_scale

    @property
    def ivs_magnitude_0(self):
        return self.grid.e_peak if self.e0 is None else self.e0

    @property
    def current_cap(self):
        return self.divergence_factor * self.grid.i_rated_peak

    @property
    def oscillation_threshold_a(self):
        """Harmonic RMS current above which an oscillation counts as sustained."""
        return self.oscillation_fraction * self.grid.i_rated_peak / math.sqrt(2)

    def mode_at(self, t):
        entry = self.va_schedule[0]
        for candidate in self.va_schedule:
            if candidate.t_start <= t + 1e-12:
                entry = candidate
        return entry


# ============================================================================
# Trace
# ============================================================================

@dataclass(frozen=True, eq=False)
class SimTrace:
    t: np.ndarray
    e: np.ndarray
    v_pcc: np.ndarray
    i: np.ndarray
    i_ref: np.ndarray
    v_cmd: np.ndarray
    p: np.ndarray
    q: np.ndarray
    va_mode: np.ndarray
    f_s: float
    diverged_at: float = None

    def __len__(self):
        return self.t.size

    CHANNELS = ('i', 'v_pcc', 'e', 'i_ref', 'v_cmd')

    def channel(self, name):
        if name not in self.CHANNELS:
            raise InvalidRange(f"unknown channel '{name}', expected one of {self.CHANNELS}")
        return getattr(self, name)

    def to_frame(self):
        return pd.DataFrame({
            't_s': self.t,
            'e_alpha': self.e.real, 'e_beta': self.e.imag,
            'vpcc_alpha': self.v_pcc.real, 'vpcc_beta': self.v_pcc.imag,
            'i_alpha': self.i.real, 'i_beta': self.i.imag,
            'iref_alpha': self.i_ref.real, 'iref_beta': self.i_ref.imag,
            'p_w': self.p, 'q_var': self.q,
            'va_mode': self.va_mode,
        })

    @classmethod
    def from_frame(cls, df):
        """Rebuild a trace from its CSV columns (v_cmd is not exported)."""
        missing = [c for c in TRACE_COLUMNS if c not in df.columns]
        if missing:
            raise FileFormatError(f"trace is missing columns: {missing}")
        if len(df) < 2:
            raise FileFormatError("trace needs at least two samples")
        t = df['t_s'].to_numpy(dtype=float)
        dt = np.diff(t)
        if np.any(dt <= 0) or np.max(np.abs(dt - dt.mean())) > 1e-6 * dt.mean() + 1e-12:
            raise FileFormatError("trace timestamps are not uniformly sampled")
        try:
            def cx(a, b):
                return df[a].to_numpy(dtype=float) + 1j * df[b].to_numpy(dtype=float)
            return cls(
                t=t,
                e=cx('e_alpha', 'e_beta'),
                v_pcc=cx('vpcc_alpha', 'vpcc_beta'),
                i=cx('i_alpha', 'i_beta'),
                i_ref=cx('iref_alpha', 'iref_beta'),
                v_cmd=np.full(t.size, np.nan + 0j),
                p=df['p_w'].to_numpy(dtype=float),
                q=df['q_var'].to_numpy(dtype=float),
                va_mode=df['va_mode'].astype(str).to_numpy(),
                f_s=1.0 / float(dt.mean()),
            )
        except (TypeError, ValueError) as e:
            raise FileFormatError(f"trace has non-numeric values: {e}") from None


# ============================================================================
# Plant
# ============================================================================

@dataclass(frozen=True)
class PlantState:
    i_f: complex
    v_c: complex
    i_g: complex


class PlantModel:
    """
    Linear LCL network between the inverter voltage v_o and the grid-side
    source w = e_g + v_inj.

    C_f > 0: states [i_f, v_c, i_g]
        L_f di_f/dt = v_o - v_c
        C_f dv_c/dt = i_f - i_g
        L_g di_g/dt = v_c - R_g i_g - w
    C_f = 0: single state i = i_f = i_g through L_f + L_g, v_c algebraic.
    """

    def __init__(self, plant, grid):
        self.l_f = plant.l_f
        self.c_f = plant.c_f
        self.r_g = grid.r_g
        self.l_g = grid.l_g
        if self.c_f > 0:
            if self.l_g <= 0:
                raise InvalidRange("a filter capacitor on the PCC needs grid inductance l_g > 0")
            self.a = np.array([
                [0.0, -1.0 / self.l_f, 0.0],
                [1.0 / self.c_f, 0.0, -1.0 / self.c_f],
                [0.0, 1.0 / self.l_g, -self.r_g / self.l_g],
            ])
            self.b = np.array([
                [1.0 / self.l_f, 0.0],
                [0.0, 0.0],
                [0.0, -1.0 / self.l_g],
            ])
        else:
            l_t = self.l_f + self.l_g
            self.a = np.array([[-self.r_g / l_t]])
            self.b = np.array([[1.0 / l_t, -1.0 / l_t]])
        self._zoh_cache = {}

    @property
    def order(self):
        return self.a.shape[0]

    def discretize(self, dt):
        """(Φ, Γ) of the exact ZOH step over dt, cached for the last few dt."""
        if dt not in self._zoh_cache:
            if len(self._zoh_cache) >= ZOH_CACHE_SIZE:
                self._zoh_cache.pop(next(iter(self._zoh_cache)))
            n = self.order
            phi, gamma, _, _, _ = signal.cont2discrete(
                (self.a, self.b, np.eye(n), np.zeros((n, 2))), dt, method='zoh'
            )
            self._zoh_cache[dt] = (phi, gamma)
        return self._zoh_cache[dt]

    def to_vector(self, state):
        if self.order == 3:
            return np.array([state.i_f, state.v_c, state.i_g], dtype=complex)
        return np.array([state.i_f], dtype=complex)

    def outputs(self, x, v_o, w):
        """(i_f, v_c, i_g) for state vector x under inputs v_o and w."""
        if self.order == 3:
            return x[0], x[1], x[2]
        i = x[0]
        l_t = self.l_f + self.l_g
        v_c = (self.l_f * w + self.l_f * self.r_g * i + self.l_g * v_o) / l_t
        return i, v_c, i

    def energy(self, x):
        if self.order == 3:
            return 0.5 * (self.l_f * abs(x[0]) ** 2 + self.c_f * abs(x[1]) ** 2 + self.l_g * abs(x[2]) ** 2)
        return 0.5 * (self.l_f + self.l_g) * abs(x[0]) ** 2


@lru_cache(maxsize=32)
def plant_model(plant, grid):
    return PlantModel(plant, grid)


def plant_step(state, v_o, grid_emf, dt, p, g):
    """Advance the network by one ZOH step of length dt."""
    model = plant_model(p, g)
    phi, gamma = model.discretize(dt)
    x = phi @ model.to_vector(state) + gamma @ np.array([v_o, grid_emf], dtype=complex)
    i_f, v_c, i_g = model.outputs(x, v_o, grid_emf)
    return PlantState(complex(i_f), complex(v_c), complex(i_g))


# ============================================================================
# Discrete filters
# ============================================================================

class DiscreteFilter:
    """
    Direct-form-II-transposed filter with complex state.

    b and a are coefficients of z^0, z^-1, ... with a[0] normalized to 1.
    """

    def __init__(self, b, a):
        b = np.atleast_1d(np.asarray(b, dtype=float))
        a = np.atleast_1d(np.asarray(a, dtype=float))
        n = max(b.size, a.size)
        self.b = np.pad(b, (0, n - b.size)) / a[0]
        self.a = np.pad(a, (0, n - a.size)) / a[0]
        self.state = np.zeros(n - 1, dtype=complex)

    @classmethod
    def from_element(cls, elem, prewarp_rad_s, t_s):
        """
        Bilinear discretization of a rational element, exact at prewarp_rad_s.
        """
        k = prewarp_rad_s / math.tan(prewarp_rad_s * t_s / 2)
        b_z, a_z = signal.bilinear(elem.num_coeffs[::-1], elem.den_coeffs[::-1], fs=k / 2)
        return cls(b_z, a_z)

    @property
    def order(self):
        return self.state.size

    def response(self, z):
        zi = 1.0 / z
        powers = zi ** np.arange(self.b.size)
        return complex(np.dot(self.b, powers) / np.dot(self.a, powers))

    def step(self, u):
        b, a, s = self.b, self.a, self.state
        y = b[0] * u + (s[0] if s.size else 0.0)
        n = s.size
        for j in range(n):
            nxt = s[j + 1] if j + 1 < n else 0.0
            s[j] = b[j + 1] * u - a[j + 1] * y + nxt
        return y

    def warm_start(self, u_now, y_target, z0):
        """
        Load the state so the next step outputs y_target for input u_now,
        with the deeper states filled as if u and y had been rotating at z0.
        """
        n = self.order
        s = np.zeros(n, dtype=complex)
        for i in range(1, n + 1):
            acc = 0j
            for m in range(i, n + 1):
                acc += (self.b[m] * u_now - self.a[m] * y_target) * z0 ** (-(1 + m - i))
            s[i - 1] = acc
        if n:
            s[0] = y_target - self.b[0] * u_now
        self.state = s


# ============================================================================
# Controller
# ============================================================================

@dataclass
class ControllerState:
    ivs_phase: float
    ivs_magnitude: float
    va_filter: DiscreteFilter
    pr: DiscreteFilter
    delay_line: deque
    x_p: float = 0.0
    x_q: float = 0.0
    va_mode: str = 'proposed'
    omega: float = None
    i_ref_prev: complex = 0j
    pending_switch: ScheduleEntry = None


class Controller:
    """VA + PR current control with VFF, one-sample delay and droop."""

    def __init__(self, cfg, state):
        self.cfg = cfg
        self.state = state
        c = cfg.controller
        d = cfg.droop
        self.t_s = c.t_s
        self.omega_1 = c.omega_1
        self.alpha_p = 1.0 - math.exp(-d.omega_p_si * self.t_s)
        self.alpha_q = 1.0 - math.exp(-d.omega_q_si * self.t_s)
        self.k_p_si = d.k_p_si
        self.k_q_si = d.k_q_si
        self.e0 = cfg.ivs_magnitude_0
        self.limit = cfg.plant.v_cmd_limit if cfg.saturate else None
        if self.state.omega is None:
            self.state.omega = self.omega_1

    @staticmethod
    def make_va_filter(va_params, c):
        return DiscreteFilter.from_element(va_element(va_params), c.omega_1, c.t_s)

    @staticmethod
    def make_pr_filter(c):
        return DiscreteFilter.from_element(gcc_pr(c), c.omega_1, c.t_s)

    @property
    def pending(self):
        """Command applied over the current control period."""
        return self.state.delay_line[0]

    def request_switch(self, entry):
        self.state.pending_switch = entry

    def droop_update(self, p_meas, q_meas):
        """Error-driven droop through first-order LPFs; returns (phase, magnitude)."""
        st = self.state
        st.x_p += self.alpha_p * ((self.cfg.p_ref - p_meas) - st.x_p)
        st.x_q += self.alpha_q * ((self.cfg.q_ref - q_meas) - st.x_q)
        st.omega = self.omega_1 + self.k_p_si * st.x_p
        st.ivs_magnitude = self.e0 + self.k_q_si * st.x_q
        return st.ivs_phase, st.ivs_magnitude

    def control_step(self, v_pcc, i, t):
        """
        One control period. Returns (v_cmd, record) where v_cmd is the new
        command, applied after the computation delay.
        """
        st = self.state
        s_pq = 1.5 * v_pcc * np.conj(i)
        p_meas, q_meas = s_pq.real, s_pq.imag

        phase, mag = self.droop_update(p_meas, q_meas)
        e = mag * np.exp(1j * phase)
        st.ivs_phase = phase + st.omega * self.t_s

        u = e - v_pcc
        if st.pending_switch is not None:
            entry = st.pending_switch
            z0 = np.exp(1j * st.omega * self.t_s)
            new_filter = self.make_va_filter(entry.va_params, self.cfg.controller)
            new_filter.warm_start(u, st.i_ref_prev * z0, z0)
            st.va_filter = new_filter
            st.va_mode = entry.va_mode
            st.pending_switch = None
            logger.debug(f"VA switched to {entry.va_mode} at t = {t:.4f} s")

        i_ref = st.va_filter.step(u)
        if self.cfg.i_ref_override is not None:
            i_ref = self.cfg.i_ref_override(t)
        st.i_ref_prev = i_ref

        v_cmd = st.pr.step(i_ref - i) + v_pcc
        if self.limit is not None and abs(v_cmd) > self.limit:
            v_cmd = v_cmd * (self.limit / abs(v_cmd))

        st.delay_line.append(v_cmd)
        record = (e, i_ref, v_cmd, p_meas, q_meas)
        return v_cmd, record


# ============================================================================
# Initialization
# ============================================================================

def steady_state_operating_point(cfg):
    """
    Phasor steady state at ω_1 with the first scheduled VA: solve for the
    IVS angle δ and magnitude E giving P = P_ref and E = E_0 + K_q(Q_ref - Q).

    Returns:
        dict of phasors (e, v, i, i_g, v_o) and the solved delta, magnitude, p, q
    """
    c, p, g = cfg.controller, cfg.plant, cfg.grid
    w1 = c.omega_1
    y_v = va_element(cfg.va_schedule[0].va_params)(1j * w1)
    y_c = 1j * w1 * p.c_f
    z_g = complex(g.r_g, w1 * g.l_g)
    e_g = cfg.emf_peak
    e0 = cfg.ivs_magnitude_0
    k_q = cfg.droop.k_q_si

    def network(delta, mag):
        e = mag * np.exp(1j * delta)
        if z_g == 0:
            v = complex(e_g)
        else:
            y_g = 1.0 / z_g
            v = (y_v * e + y_g * e_g) / (y_v + y_c + y_g)
        i = y_v * (e - v)
        s = 1.5 * v * np.conj(i)
        return e, v, i, s

    scale_p = g.p_rated
    scale_e = max(e0, 1.0)

    def residual(x):
        _, _, _, s = network(x[0], x[1])
        return [
            (s.real - cfg.p_ref) / scale_p,
            (x[1] - e0 - k_q * (cfg.q_ref - s.imag)) / scale_e,
        ]

    sol, info, ier, msg = optimize.fsolve(residual, [0.05, e0], full_output=True, xtol=1e-12)
    if ier != 1:
        raise NumericError(f"steady-state operating point did not converge: {msg}")
    delta, mag = float(sol[0]), float(sol[1])
    e, v, i, s = network(delta, mag)
    i_g = i - y_c * v
    v_o = v + 1j * w1 * p.l_f * i
    logger.debug(f"Operating point: δ = {math.degrees(delta):.3f}°, E = {mag:.3f} V, "
                 f"P = {s.real:.1f} W, Q = {s.imag:.1f} var")
    return {
        'delta': delta, 'magnitude': mag,
        'e': e, 'v': v, 'i': i, 'i_g': i_g, 'v_o': v_o,
        'p': s.real, 'q': s.imag,
    }


def _initial_conditions(cfg):
    c = cfg.controller
    t_s = c.t_s
    va_filter = Controller.make_va_filter(cfg.va_schedule[0].va_params, c)
    pr = Controller.make_pr_filter(c)

    if cfg.initial == 'zero':
        # with no capacitor the PCC starts at the grid EMF; pre-load the command to match
        v0 = complex(cfg.emf_peak) if cfg.plant.c_f == 0 else 0j
        state = ControllerState(
            ivs_phase=0.0,
            ivs_magnitude=cfg.ivs_magnitude_0,
            va_filter=va_filter,
            pr=pr,
            delay_line=deque([v0], maxlen=COMPUTATION_DELAY_SAMPLES),
            va_mode=cfg.va_schedule[0].va_mode,
        )
        return PlantState(0j, 0j, 0j), state

    op = steady_state_operating_point(cfg)
    w1 = c.omega_1
    z0 = np.exp(1j * w1 * t_s)
    va_filter.warm_start(op['e'] - op['v'], op['i'], z0)
    v_cmd_0 = op['v_o'] * np.exp(1j * w1 * 1.5 * t_s)
    pr.warm_start(0j, v_cmd_0 - op['v'], z0)

    state = ControllerState(
        ivs_phase=op['delta'],
        ivs_magnitude=op['magnitude'],
        va_filter=va_filter,
        pr=pr,
        delay_line=deque([op['v_o'] * np.exp(1j * w1 * 0.5 * t_s)], maxlen=COMPUTATION_DELAY_SAMPLES),
        x_p=0.0,
        x_q=cfg.q_ref - op['q'],
        va_mode=cfg.va_schedule[0].va_mode,
        i_ref_prev=op['i'] / z0,
    )
    return PlantState(op['i'], op['v'], op['i_g']), state


# ============================================================================
# Run
# ============================================================================

def run(cfg, raise_on_divergence=False):
    """
    Simulate cfg.t_end seconds at the control rate.

    Runs stop early once |i| exceeds cfg.current_cap; the trace then
    carries diverged_at. With raise_on_divergence the same condition
    raises DivergenceDetected holding the truncated trace.
    """
    start_time = time.time()
    c = cfg.controller
    t_s = c.t_s
    n_steps = int(round(cfg.t_end / t_s))
    n_sub = int(cfg.plant_substeps)

    model = plant_model(cfg.plant, cfg.grid)
    phi, gamma = model.discretize(t_s / n_sub)
    g_o, g_w = gamma[:, 0].astype(complex), gamma[:, 1].astype(complex)

    plant0, ctl_state = _initial_conditions(cfg)
    ctl = Controller(cfg, ctl_state)
    x = model.to_vector(plant0)

    # grid-side source at control instants and substep midpoints
    w1 = c.omega_1
    k = np.arange(n_steps)
    t_ctrl = k * t_s
    t_mid = (k[:, None] + (np.arange(n_sub)[None, :] + 0.5) / n_sub) * t_s
    w_ctrl = cfg.emf_peak * np.exp(1j * w1 * t_ctrl)
    w_mid = cfg.emf_peak * np.exp(1j * w1 * t_mid)
    if cfg.injection is not None:
        w_ctrl = w_ctrl + cfg.injection(t_ctrl)
        w_mid = w_mid + cfg.injection(t_mid)

    noise = np.zeros(n_steps, dtype=complex)
    if cfg.seed is not None and cfg.dither_a > 0:
        rng = np.random.default_rng(cfg.seed)
        noise = cfg.dither_a * (rng.standard_normal(n_steps) + 1j * rng.standard_normal(n_steps)) / math.sqrt(2)

    switches = list(cfg.va_schedule[1:])
    cap = cfg.current_cap

    out = {name: np.zeros(n_steps, dtype=complex) for name in ('e', 'v', 'i', 'i_ref', 'v_cmd')}
    out_p = np.zeros(n_steps)
    out_q = np.zeros(n_steps)
    modes = np.empty(n_steps, dtype=object)
    diverged_at = None
    n_done = n_steps

    for kk in range(n_steps):
        t = t_ctrl[kk]
        if switches and switches[0].t_start <= t + 1e-12:
            ctl.request_switch(switches.pop(0))

        v_o = ctl.pending
        i_f, v_c, _ = model.outputs(x, v_o, w_ctrl[kk])

        if not (abs(i_f) <= cap):
            diverged_at = float(t)
            n_done = kk
            logger.warning(f"Divergence at t = {t:.4f} s: |i| = {abs(i_f):.1f} A exceeds {cap:.1f} A")
            break

        v_cmd, (e, i_ref, _, p_meas, q_meas) = ctl.control_step(v_c, i_f + noise[kk], t)

        out['e'][kk] = e
        out['v'][kk] = v_c
        out['i'][kk] = i_f
        out['i_ref'][kk] = i_ref
        out['v_cmd'][kk] = v_cmd
        out_p[kk] = p_meas
        out_q[kk] = q_meas
        modes[kk] = ctl.state.va_mode

        for m in range(n_sub):
            x = phi @ x + g_o * v_o + g_w * w_mid[kk, m]

    trace = SimTrace(
        t=t_ctrl[:n_done],
        e=out['e'][:n_done],
        v_pcc=out['v'][:n_done],
        i=out['i'][:n_done],
        i_ref=out['i_ref'][:n_done],
        v_cmd=out['v_cmd'][:n_done],
        p=out_p[:n_done],
        q=out_q[:n_done],
        va_mode=modes[:n_done].astype(str),
        f_s=c.f_s,
        diverged_at=diverged_at,
    )
    logger.debug(f"PERF: run({cfg.t_end:g} s, {n_done} steps) took {time.time() - start_time:.3f}s")

    if diverged_at is not None and raise_on_divergence:
        raise DivergenceDetected(diverged_at, trace)
    return trace
