#!/usr/bin/env python3
"""
gfmp: passivity analysis and simulation of VA-CC grid-forming inverters.

Usage:
  python3 gfmp.py design
  python3 gfmp.py impedance --va conv --variant delay
  python3 gfmp.py simulate --schedule proposed@0,conventional@0.4,proposed@0.5
  python3 gfmp.py scan
  python3 gfmp.py fft out/trace.csv --t0 0.4 --t1 0.5
  python3 gfmp.py calibrate
  python3 gfmp.py history --limit 5

Exit codes: 0 success (instability is a result, not a failure),
2 bad input, 3 numeric or internal failure.
"""

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime

import numpy as np
import pandas as pd

import history
import measurement
import simulator
from config import load_config, parse_schedule
from errors import FileFormatError, GfmpError, InputError, NumericError
from impedance import (
    VARIANTS,
    build_zeq,
    calibrate_kccp,
    kccp_sensitivity,
    passivity_scan,
    return_ratio_assessment,
    va_impedance_table,
    z_eq_delay,
)
from models import design_residual, harmonic_asymptote, va_element, z_grid_at_pcc

logger = logging.getLogger('gfmp')

TOOL_VERSION = '0.3.0'
SCHEMA_VERSION = 1

# Fixed float format so identical runs give byte-identical CSVs
CSV_FLOAT_FORMAT = '%.10g'

VA_CHOICES = {'conv': 'conventional', 'prop': 'proposed'}

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

PLOT_TEMPLATE = '''#!/usr/bin/env python3
"""Plot {csv_name} (written by gfmp {subcommand})."""

import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv("{csv_name}")
x = df.columns[0]
columns = [c for c in df.columns[1:] if pd.api.types.is_numeric_dtype(df[c])]
fig, axes = plt.subplots(len(columns), 1, sharex=True, figsize=(8, 2 * len(columns)))
for ax, col in zip(list(getattr(axes, "flat", [axes])), columns):
    ax.plot(df[x], df[col])
    ax.set_ylabel(col)
    {xscale}
axes_list = list(getattr(axes, "flat", [axes]))
axes_list[-1].set_xlabel(x)
plt.tight_layout()
plt.show()
'''


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return {'re': obj.real, 'im': obj.imag}
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


class RunOutputs:
    """Output directory plus the list of files written into it."""

    def __init__(self, out_dir, subcommand, plot_scripts=False):
        self.out_dir = out_dir
        self.subcommand = subcommand
        self.plot_scripts = plot_scripts
        self.files = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def write_csv(self, df, name, log_x=False):
        df.to_csv(self.path(name), index=False, float_format=CSV_FLOAT_FORMAT)
        self.files.append(name)
        logger.info(f"Wrote {self.path(name)} ({len(df)} rows)")
        if self.plot_scripts:
            script = f"plot_{os.path.splitext(name)[0]}.py"
            with open(self.path(script), 'w') as f:
                f.write(PLOT_TEMPLATE.format(
                    csv_name=name,
                    subcommand=self.subcommand,
                    xscale='ax.set_xscale("log")' if log_x else 'pass',
                ))
            self.files.append(script)

    def write_json(self, payload, name):
        body = {'schema_version': SCHEMA_VERSION, **payload}
        with open(self.path(name), 'w') as f:
            json.dump(body, f, indent=2, sort_keys=True, default=_json_default)
            f.write('\n')
        self.files.append(name)
        logger.info(f"Wrote {self.path(name)}")


def _va_mode(flag):
    return VA_CHOICES[flag]


def _apply_grid_spec(cfg, spec):
    """--grid-spec SCR,XR replaces the grid strength and X/R ratio."""
    try:
        scr, xr = (float(v) for v in spec.split(','))
    except ValueError:
        raise InputError(f"--grid-spec expects 'SCR,XR', got '{spec}'") from None
    g = cfg.values['grid']
    g.update({'scr': scr, 'xr_ratio': xr, 'r_g_ohm': None, 'l_g_h': None})
    cfg.overridden.update({('grid', 'scr'), ('grid', 'xr_ratio')})


# ============================================================================
# Subcommands
# ============================================================================

def cmd_design(cfg, args, out):
    """Split the design-point impedance into R_vσ + (R_vπ ‖ L_v0)."""
    d = cfg.design_point()
    va = cfg.va_proposed()
    residual = design_residual(d, va)

    print(f"R_vσ  = {va.r_v_sigma:.6f} Ω")
    print(f"R_vπ  = {va.r_v_pi:.6f} Ω")
    print(f"L_v0  = {va.l_v0 * 1e3:.6f} mH")
    print(f"|Z_v,prop(jω_1) - (R_v + jX_v)| = {residual:.3e} Ω")
    print(f"High-frequency resistance R_vσ + R_vπ = {harmonic_asymptote(va):.4f} Ω")

    summary = {
        'design_point': {'r_v_ohm': d.r_v, 'x_v_ohm': d.x_v, 'f_1_hz': d.omega_1 / (2 * np.pi)},
        'r_v_sigma_ohm': va.r_v_sigma,
        'r_v_pi_ohm': va.r_v_pi,
        'l_v0_h': va.l_v0,
        'residual_ohm': residual,
        'harmonic_asymptote_ohm': harmonic_asymptote(va),
    }
    out.write_json(summary, 'design.json')
    return summary


def cmd_impedance(cfg, args, out):
    """Bode data of 1/Y_v and Z_eq, passivity bands and return-ratio crossovers."""
    if args.grid_spec:
        _apply_grid_spec(cfg, args.grid_spec)
    plant = cfg.plant()
    c = cfg.controller()
    grid = cfg.analysis_grid()
    analysis = cfg.section('analysis')
    mode = _va_mode(args.va)
    tag = f"{args.va}_{args.variant}"

    out.write_csv(va_impedance_table(grid, cfg.va_conventional(), cfg.va_proposed()),
                  'virtual_impedance.csv', log_x=True)

    zeq = build_zeq(args.variant, cfg.va(mode), c, plant)
    report = passivity_scan(zeq, grid, f_1_hz=c.f_1, guard_hz=analysis['guard_hz'])
    out.write_csv(report.to_frame(), f"zeq_{tag}.csv", log_x=True)

    zg = z_grid_at_pcc(cfg.grid(), plant, include_capacitor=analysis['include_filter_capacitor'])
    assessment = return_ratio_assessment(zeq, zg, grid)
    out.write_csv(assessment.to_frame(), f"return_ratio_{tag}.csv", log_x=True)

    warnings = []
    if report.is_passive:
        logger.info(f"Z_eq ({mode}, {args.variant}) is passive on the analysis grid")
    else:
        bands = ', '.join(f"{lo:.1f}-{hi:.1f} Hz" for lo, hi in report.non_passive_bands)
        warnings.append(f"Z_eq ({mode}, {args.variant}) is non-passive in: {bands}")
        if mode == 'proposed' and args.variant in ('delay', 'sampled'):
            warnings.append(
                f"Proposed VA loses passivity above {report.first_violation_hz:.0f} Hz: the delay phase "
                f"at K_cc,p = {c.k_cc_p:.3f} V/A (K_cc,p·T_d/L_f = {c.k_cc_p * c.t_d / plant.l_f:.3f}) "
                f"exceeds what R_vσ + R_vπ absorbs"
            )
    for message in warnings:
        logger.warning(message)
    logger.info(f"Return ratio: gain crossovers {assessment.gain_crossover_hz} Hz, "
                f"phase crossovers {assessment.phase_crossover_hz} Hz, verdict {assessment.verdict}")

    summary = {
        'va': mode,
        'variant': args.variant,
        'passivity': report.to_dict(),
        'return_ratio': assessment.to_dict(),
        'warnings': warnings,
    }
    out.write_json(summary, f"passivity_{tag}.json")
    return summary


def cmd_simulate(cfg, args, out):
    """Run the closed loop over the VA schedule and summarize it."""
    schedule = parse_schedule(args.schedule) if args.schedule else None
    sim = cfg.sim_config(schedule=schedule, t_end=args.t_end)
    logger.info(f"Simulating {sim.t_end:g} s: " +
                ', '.join(f"{e.va_mode}@{e.t_start:g}" for e in sim.va_schedule))

    trace = simulator.run(sim)
    out.write_csv(trace.to_frame(), 'trace.csv')

    summary = measurement.summarize_trace(trace, sim)
    if any(e.va_mode == 'conventional' for e in sim.va_schedule):
        zeq = z_eq_delay(va_element(cfg.va_conventional()), sim.controller, sim.plant)
        zg = z_grid_at_pcc(sim.grid, sim.plant,
                           include_capacitor=cfg.section('analysis')['include_filter_capacitor'])
        try:
            a = return_ratio_assessment(zeq, zg, cfg.analysis_grid())
            summary['conventional_prediction'] = {
                'gain_crossover_hz': a.gain_crossover_hz,
                'verdict': a.verdict,
            }
        except NumericError as e:
            logger.warning(f"No analytic prediction for the conventional interval: {e}")

    if summary['diverged']:
        logger.warning(f"Run diverged at t = {summary['diverged_at_s']:.4f} s")
    elif summary['sustained_oscillation']:
        logger.warning("Run ends in a sustained harmonic oscillation bounded by the command limit")
    for iv in summary['intervals']:
        logger.info(f"  {iv['mode']:>12} {iv['t_start_s']:.3f}-{iv['t_end_s']:.3f} s: "
                    f"P = {iv['p_mean_w']:.1f} W, harmonic RMS = {iv['harmonic_rms_a']:.3f} A, "
                    f"dominant = {iv['dominant_hz']} Hz")
    out.write_json(summary, 'simulation_summary.json')
    return summary


def cmd_scan(cfg, args, out):
    """Injection scan of the inverter impedance against the analytic form."""
    scan = cfg.scan_config()
    sim = cfg.sim_config(schedule=[{'t_start_s': 0.0, 'va': _va_mode(args.va)}])
    result = measurement.frequency_scan(scan, sim, threads=measurement.worker_count())
    if result.points:
        out.write_csv(result.to_frame(), 'scan.csv', log_x=True)
        logger.info(f"Worst error vs {result.reference} form: {result.max_mag_err_pct}% magnitude, "
                    f"{result.max_phase_err_deg}° phase")
        if result.reference != 'delay':
            logger.info(f"Worst error vs delay form: {result.max_delay_mag_err_pct}% magnitude, "
                        f"{result.max_delay_phase_err_deg}° phase")
    summary = result.to_dict()
    out.write_json(summary, 'scan.json')
    return summary


def cmd_fft(cfg, args, out):
    """Spectrum of one phase of a trace CSV."""
    try:
        df = pd.read_csv(args.trace)
    except FileNotFoundError:
        raise FileFormatError(f"trace file not found: {args.trace}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FileFormatError(f"cannot parse trace file {args.trace}: {e}") from None
    trace = simulator.SimTrace.from_frame(df)

    f = cfg.section('fft')
    report = measurement.fft_spectrum(
        trace,
        channel=args.channel or f['channel'],
        window=args.window or f['window'],
        t_start=f['t0_s'] if args.t0 is None else args.t0,
        t_end=f['t1_s'] if args.t1 is None else args.t1,
        f_1_hz=cfg.section('grid')['f_1_hz'],
        min_cycles=int(f['min_cycles']),
    )
    logger.info(f"Dominant non-fundamental component: {report.dominant_harmonic_hz:.2f} Hz, "
                f"{report.dominant_magnitude:.4f} (resolution {report.resolution_hz:.2f} Hz)")
    out.write_csv(report.to_frame(), 'spectrum.csv')
    summary = report.to_dict()
    summary['trace_file'] = os.path.abspath(args.trace)
    out.write_json(summary, 'spectrum.json')
    return summary


def cmd_calibrate(cfg, args, out):
    """Fit K_cc,p to the crossover targets and tabulate the sensitivity."""
    a = cfg.section('analysis')
    plant = cfg.plant()
    c = cfg.controller()
    va = cfg.va_conventional()
    zg = z_grid_at_pcc(cfg.grid(), plant, include_capacitor=a['include_filter_capacitor'])
    grid = cfg.analysis_grid(f_max_hz=c.nyquist_hz)
    k_range = (a['calibration_k_min'], a['calibration_k_max'])

    result = calibrate_kccp(
        va, c, plant, zg,
        k_range=k_range,
        points=int(a['calibration_points']),
        gain_target_hz=a['gain_target_hz'],
        phase_target_hz=a['phase_target_hz'],
        tolerance=a['calibration_tolerance'],
        grid=grid,
    )
    table = kccp_sensitivity(va, c, plant, zg, np.geomspace(*k_range, 12), grid=grid)
    out.write_csv(table, 'kccp_sensitivity.csv', log_x=True)
    summary = result.to_dict()
    out.write_json(summary, 'calibration.json')
    return summary


def cmd_history(args, database_url):
    """Print the run ledger."""
    if args.show is not None:
        run = history.get_run(args.show, database_url)
        if run is None:
            raise InputError(f"no run with id {args.show} in {database_url}")
        print(json.dumps(run, indent=2, sort_keys=True))
        return

    runs = history.list_runs(limit=args.limit, database_url=database_url)
    if not runs:
        print("No runs recorded.")
        return
    print(f"{'ID':>5}  {'Started':<26} {'Command':<10} {'Duration':>9}  Exit")
    print("-" * 60)
    for r in runs:
        print(f"{r['id']:>5}  {r['started_at']:<26} {r['subcommand']:<10} {r['duration_s']:>8.2f}s  {r['exit_code']}")


COMMANDS = {
    'design': cmd_design,
    'impedance': cmd_impedance,
    'simulate': cmd_simulate,
    'scan': cmd_scan,
    'fft': cmd_fft,
    'calibrate': cmd_calibrate,
}


# ============================================================================
# Argument parsing
# ============================================================================

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML file merged over parameters.yaml')
    common.add_argument('--out', default='gfmp_out', help='output directory (default: gfmp_out)')
    common.add_argument('--db', help='run-ledger database URL (default: $GFMP_DATABASE_URL, off if unset)')
    common.add_argument('--plot-script', action='store_true',
                        help='write a matplotlib script next to every CSV')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true')
    verbosity.add_argument('--quiet', action='store_true')

    parser = argparse.ArgumentParser(prog='gfmp', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('design', parents=[common], help='proposed VA parameters from the design point')

    p = sub.add_parser('impedance', parents=[common], help='Z_eq Bode data, passivity and return ratio')
    p.add_argument('--variant', choices=VARIANTS, default='delay')
    p.add_argument('--va', choices=sorted(VA_CHOICES), default='conv')
    p.add_argument('--grid-spec', help="override grid strength as 'SCR,XR'")

    p = sub.add_parser('simulate', parents=[common], help='closed-loop time-domain run')
    p.add_argument('--schedule', help="e.g. 'proposed@0,conventional@0.4,proposed@0.5'")
    p.add_argument('--t-end', type=float, help='simulated time in seconds')

    p = sub.add_parser('scan', parents=[common], help='injection-based impedance scan')
    p.add_argument('--va', choices=sorted(VA_CHOICES), default='prop')

    p = sub.add_parser('fft', parents=[common], help='spectrum of a trace CSV')
    p.add_argument('trace', help='trace.csv written by simulate')
    p.add_argument('--channel', choices=simulator.SimTrace.CHANNELS)
    p.add_argument('--window', choices=measurement.WINDOWS)
    p.add_argument('--t0', type=float)
    p.add_argument('--t1', type=float)

    sub.add_parser('calibrate', parents=[common], help='fit K_cc,p to the crossover targets')

    p = sub.add_parser('history', parents=[common], help='list recorded runs')
    p.add_argument('--limit', type=int, default=10)
    p.add_argument('--show', type=int, help='print one run in full')

    return parser


def setup_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


def main(argv=None):
    """Parse arguments, run one subcommand and return the exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args)
    database_url = args.db or os.environ.get('GFMP_DATABASE_URL')

    if args.command == 'history':
        try:
            cmd_history(args, database_url or history.DEFAULT_DATABASE_URL)
            return EXIT_OK
        except InputError as e:
            logger.error(str(e))
            return EXIT_INPUT

    logger.info("=" * 70)
    logger.info(f"gfmp {TOOL_VERSION} - {args.command}")
    logger.info("=" * 70)

    start_time = time.time()
    started_at = datetime.now()
    cfg = None
    out = None
    summary = None

    try:
        cfg = load_config(args.config)
        cfg.log_defaults()
        out = RunOutputs(args.out, args.command, plot_scripts=args.plot_script)
        summary = COMMANDS[args.command](cfg, args, out)
        exit_code = EXIT_OK
    except InputError as e:
        logger.error(str(e))
        exit_code = EXIT_INPUT
    except GfmpError as e:
        logger.error(f"Numeric failure: {e}", exc_info=True)
        exit_code = EXIT_NUMERIC
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        exit_code = EXIT_NUMERIC

    elapsed = time.time() - start_time
    manifest = {
        'schema_version': SCHEMA_VERSION,
        'tool_version': TOOL_VERSION,
        'subcommand': args.command,
        'started_at': started_at.isoformat(),
        'duration_s': elapsed,
        'config': _safe_snapshot(cfg),
        'outputs': list(out.files) if out else [],
    }
    if exit_code == EXIT_OK:
        with open(out.path('manifest.json'), 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=_json_default)
            f.write('\n')

    if database_url:
        try:
            summary_blob = json.loads(json.dumps(summary, default=_json_default)) if summary else None
            history.record_run(manifest, summary_blob, exit_code, database_url)
        except Exception as e:
            logger.warning(f"Could not record run in {database_url}: {e}")

    logger.info(f"PERF: gfmp {args.command} took {elapsed:.3f}s (exit {exit_code})")
    return exit_code


def _safe_snapshot(cfg):
    if cfg is None:
        return {}
    try:
        return cfg.resolved_config()
    except GfmpError:
        return cfg.values


if __name__ == '__main__':
    sys.exit(main())
