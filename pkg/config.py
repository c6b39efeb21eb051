"""
Configuration for gfmp runs.

Defaults are loaded from parameters.yaml in the repo root; a user file
given with --config is merged over them key by key.
"""

import copy
import logging
import math
import os

import numpy as np
import yaml

from errors import ConfigError
from measurement import ScanConfig
from models import (
    ControllerParams,
    DesignPoint,
    GridParams,
    PlantParams,
    VaParams,
    default_k_cc_p,
    default_k_cc_r,
    design_proposed_va,
    resolve_grid,
)
from simulator import VA_MODES, DroopParams, ScheduleEntry, SimConfig
from tfcore import log_grid

logger = logging.getLogger(__name__)

DEFAULTS_PATH = os.path.join(os.path.dirname(__file__), 'parameters.yaml')

# Keys whose default is null and that accept a number
NULLABLE_NUMBERS = {
    ('grid', 'r_g_ohm'), ('grid', 'l_g_h'),
    ('controller', 'k_cc_p_v_per_a'), ('controller', 'k_cc_r'),
    ('va_design_point', 'r_v_ohm'), ('va_design_point', 'x_v_ohm'),
    ('scan', 'injection_amplitude_v'),
    ('simulation', 'seed'),
}

SCHEDULE_KEYS = {'t_start_s', 'va'}


def load_defaults():
    """Load the default parameter tree from parameters.yaml."""
    with open(DEFAULTS_PATH, 'r') as f:
        return yaml.safe_load(f)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_value(section, key, default, value):
    where = f"{section}.{key}"
    if value is None:
        if default is None or (section, key) in NULLABLE_NUMBERS:
            return value
        raise ConfigError(f"{where} may not be null")
    if (section, key) in NULLABLE_NUMBERS or _is_number(default):
        if not _is_number(value) or not math.isfinite(value):
            raise ConfigError(f"{where} must be a finite number, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if key == 'schedule':
        return _check_schedule(value)
    if key == 'frequencies_hz':
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            raise ConfigError(f"{where} must be a list of numbers or null")
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _check_schedule(value):
    if not isinstance(value, list) or not value:
        raise ConfigError("simulation.schedule must be a non-empty list")
    for entry in value:
        if not isinstance(entry, dict) or set(entry) != SCHEDULE_KEYS:
            raise ConfigError(f"schedule entries need exactly the keys {sorted(SCHEDULE_KEYS)}, got {entry!r}")
        if not _is_number(entry['t_start_s']):
            raise ConfigError(f"schedule t_start_s must be a number, got {entry['t_start_s']!r}")
        if entry['va'] not in VA_MODES:
            raise ConfigError(f"schedule va must be one of {VA_MODES}, got {entry['va']!r}")
    return value


def merge_config(defaults, user):
    """
    Merge a user tree over the defaults.

    Returns:
        (merged tree, set of overridden (section, key) pairs)

    Raises:
        ConfigError: unknown section or key, or a value of the wrong kind
    """
    merged = copy.deepcopy(defaults)
    overridden = set()
    if user is None:
        return merged, overridden
    if not isinstance(user, dict):
        raise ConfigError("config file must be a mapping of sections")

    for section, values in user.items():
        if section not in defaults:
            raise ConfigError(f"unknown config section '{section}'")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section '{section}' must be a mapping")
        for key, value in values.items():
            if key not in defaults[section]:
                raise ConfigError(f"unknown key '{section}.{key}'")
            merged[section][key] = _check_value(section, key, defaults[section][key], value)
            overridden.add((section, key))
    return merged, overridden


def parse_schedule(text):
    """
    Parse 'proposed@0,conventional@0.4,proposed@0.5' (or a bare mode for a
    single-mode run) into schedule entries.
    """
    entries = []
    for part in text.split(','):
        part = part.strip()
        if not part:
            continue
        mode, _, at = part.partition('@')
        try:
            t_start = float(at) if at else 0.0
        except ValueError:
            raise ConfigError(f"bad schedule time in '{part}'") from None
        entries.append({'t_start_s': t_start, 'va': mode.strip()})
    return _check_schedule(entries)


class GfmpConfig:
    """Merged parameter tree plus the typed objects built from it."""

    def __init__(self, values, overridden=()):
        self.values = values
        self.overridden = set(overridden)

    def log_defaults(self):
        """Log every value that still comes from parameters.yaml."""
        logger.info("Parameters not overridden (defaults):")
        for section, values in self.values.items():
            for key, value in values.items():
                if (section, key) not in self.overridden:
                    logger.info(f"  {section}.{key} = {value}")

    def section(self, name):
        return self.values[name]

    @property
    def omega_1(self):
        return 2 * math.pi * self.values['grid']['f_1_hz']

    def plant(self):
        p = self.values['plant']
        return PlantParams(l_f=p['l_f_h'], c_f=p['c_f_f'], v_dc=p['v_dc_v'])

    def grid(self):
        """Grid parameters with r_g and l_g resolved."""
        g = self.values['grid']
        params = GridParams(
            v_g_ll_rms=g['v_g_ll_rms_v'],
            p_rated=g['p_rated_w'],
            scr=g['scr'],
            xr_ratio=g['xr_ratio'],
            r_g=g['r_g_ohm'],
            l_g=g['l_g_h'],
        )
        if (params.r_g is None) != (params.l_g is None):
            raise ConfigError("grid.r_g_ohm and grid.l_g_h must be given together")
        return resolve_grid(params, self.omega_1)

    def controller(self):
        c = self.values['controller']
        omega_cc = 2 * math.pi * c['f_cc_hz']
        k_cc_p = c['k_cc_p_v_per_a']
        if k_cc_p is None:
            k_cc_p = default_k_cc_p(self.values['plant']['l_f_h'], omega_cc)
        k_cc_r = c['k_cc_r']
        if k_cc_r is None:
            k_cc_r = default_k_cc_r(k_cc_p, self.omega_1)
        return ControllerParams(
            k_cc_p=k_cc_p,
            k_cc_r=k_cc_r,
            omega_1=self.omega_1,
            omega_cc=omega_cc,
            t_d=c['t_d_s'],
            f_s=c['f_s_hz'],
        )

    def droop(self):
        d = self.values['droop']
        g = self.values['grid']
        return DroopParams(
            k_p=d['k_p_pu'],
            k_q=d['k_q_pu'],
            omega_p=d['omega_p_pu'],
            omega_q=d['omega_q_pu'],
            s_base=g['p_rated_w'],
            v_base=g['v_g_ll_rms_v'],
            omega_base=self.omega_1,
        )

    def va_conventional(self):
        v = self.values['va_conventional']
        return VaParams(r_v=v['r_v_ohm'], l_v=v['l_v_h'])

    def design_point(self):
        d = self.values['va_design_point']
        conv = self.values['va_conventional']
        r_v = conv['r_v_ohm'] if d['r_v_ohm'] is None else d['r_v_ohm']
        x_v = self.omega_1 * conv['l_v_h'] if d['x_v_ohm'] is None else d['x_v_ohm']
        return DesignPoint(r_v=r_v, x_v=x_v, omega_1=self.omega_1, r_v_sigma=d['r_v_sigma_ohm'])

    def va_proposed(self):
        return design_proposed_va(self.design_point())

    def va(self, mode):
        if mode == 'conventional':
            return self.va_conventional()
        if mode == 'proposed':
            return self.va_proposed()
        raise ConfigError(f"unknown VA mode '{mode}', expected one of {VA_MODES}")

    def schedule(self, entries=None):
        entries = self.values['simulation']['schedule'] if entries is None else entries
        return tuple(ScheduleEntry(float(e['t_start_s']), e['va'], self.va(e['va'])) for e in entries)

    def sim_config(self, schedule=None, t_end=None):
        s = self.values['simulation']
        return SimConfig(
            plant=self.plant(),
            grid=self.grid(),
            controller=self.controller(),
            va_schedule=self.schedule(schedule),
            droop=self.droop(),
            p_ref=s['p_ref_w'],
            q_ref=s['q_ref_var'],
            t_end=s['t_end_s'] if t_end is None else t_end,
            plant_substeps=int(s['plant_substeps']),
            seed=None if s['seed'] is None else int(s['seed']),
            dither_a=s['dither_a'],
            saturate=s['saturate'],
            initial=s['initial'],
            divergence_factor=s['divergence_factor'],
            oscillation_fraction=s['oscillation_fraction'],
        )

    def scan_frequencies(self):
        s = self.values['scan']
        if s['frequencies_hz'] is not None:
            return [float(f) for f in s['frequencies_hz']]
        if s['points'] < 1:
            return []
        return [float(f) for f in np.geomspace(s['f_min_hz'], s['f_max_hz'], int(s['points']))]

    def injection_amplitude(self):
        amp = self.values['scan']['injection_amplitude_v']
        return 0.005 * self.grid().e_peak if amp is None else amp

    def scan_config(self, frequencies=None):
        s = self.values['scan']
        return ScanConfig(
            frequencies_hz=tuple(self.scan_frequencies() if frequencies is None else frequencies),
            injection_amplitude=self.injection_amplitude(),
            settle_cycles=int(s['settle_cycles']),
            measure_cycles=int(s['measure_cycles']),
            min_settle_s=s['min_settle_s'],
            min_measure_s=s['min_measure_s'],
            f_1_hz=self.values['grid']['f_1_hz'],
            guard_hz=s['guard_hz'],
            growth_limit=s['growth_limit'],
            reference=s['reference'],
        )

    def analysis_grid(self, f_max_hz=None):
        a = self.values['analysis']
        return log_grid(a['f_min_hz'], a['f_max_hz'] if f_max_hz is None else f_max_hz,
                        int(a['points_per_decade']))

    def resolved_config(self):
        """
        Snapshot with every null replaced by its derived value. Loading the
        snapshot again yields the same resolved config.
        """
        out = copy.deepcopy(self.values)
        c = self.controller()
        g = self.grid()
        d = self.design_point()
        out['controller']['k_cc_p_v_per_a'] = c.k_cc_p
        out['controller']['k_cc_r'] = c.k_cc_r
        out['grid']['r_g_ohm'] = g.r_g
        out['grid']['l_g_h'] = g.l_g
        out['va_design_point']['r_v_ohm'] = d.r_v
        out['va_design_point']['x_v_ohm'] = d.x_v
        out['scan']['injection_amplitude_v'] = self.injection_amplitude()
        return out


def load_config(path=None):
    """
    Load defaults and merge the user file at path over them.

    Raises:
        ConfigError: unreadable file, bad YAML, unknown keys or bad values
    """
    defaults = load_defaults()
    user = None
    if path:
        try:
            with open(path, 'r') as f:
                user = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
        logger.info(f"Loaded config overrides from {path}")
    merged, overridden = merge_config(defaults, user)
    return GfmpConfig(merged, overridden)


def config_from_dict(values):
    """Build a config from an in-memory tree, e.g. a manifest snapshot."""
    merged, overridden = merge_config(load_defaults(), values)
    return GfmpConfig(merged, overridden)
