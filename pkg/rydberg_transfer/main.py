"""
Rydberg circular-state transfer simulator

Command-line entry point: loads a run configuration, dispatches the
experiment recipes and optimizations, and writes CSV curves plus one JSON
summary per run.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from pydantic import ValidationError

import constants
from models.errors import ConfigError, RydbergError
from models.schemas import (
    CODATA,
    DefectTable,
    FieldRamp,
    PulseEnvelope,
    PulseSchedule,
    ResolvedRun,
    RunConfig,
    SweepSection,
)
from services.dynamics import adiabatic_scan, detuning, rabi_scan
from services.experiments import (
    adiabatic_experiment,
    autler_townes_experiment,
    binomial_sample,
    count_maxima,
    probe_calibration_sequence,
    rabi_scan_experiment,
    sigma_minus_rabi_experiment,
)
from services.pulse_opt import (
    ControlModel,
    fidelity,
    hydrogen_control_model,
    load_schedule,
    multi_start,
    optimize,
    rb_control_model,
    save_schedule,
    simulate_schedule,
    single_pulse_schedule,
)
from services.rf_hardware import (
    TransferMatrix,
    drive_for_rabi,
    drive_purity,
    field_at_center,
    optimize_polarization,
    purity,
    save_drives,
)
from services.stark_manifold import load_defect_table, stark_map_table
from utils import configure_logging, env_default, read_ini, save_json_file, write_csv

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

MHZ = constants.TWO_PI * constants.MHZ


def load_config(path: Optional[Path]) -> RunConfig:
    """Read and validate an INI run configuration; no path gives the defaults."""
    if path is None:
        return RunConfig()
    sections = read_ini(path)
    try:
        return RunConfig.model_validate(sections)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


@dataclass
class RunContext:
    command: str
    config: RunConfig
    run: ResolvedRun
    output_dir: Path
    workers: int
    files: List[str]

    @property
    def defects(self) -> DefectTable:
        if self.config.physics.defects_file:
            return load_defect_table(Path(self.config.physics.defects_file))
        return DefectTable.rubidium()

    def model_options(self) -> Dict[str, object]:
        options: Dict[str, object] = {"omega_rf": self.run.omega_rf}
        if self.run.model == "rb":
            options.update(defects=self.defects, window=self.run.window, ladder_depth=self.run.ladder_depth)
        return options

    def sweep(self, default: SweepSection) -> SweepSection:
        return self.config.sweep if "sweep" in self.config.model_fields_set else default

    @property
    def delta(self) -> float:
        if self.run.delta is not None:
            return self.run.delta
        return detuning(self.run.n, self.run.field, self.run.omega_rf)

    def write(self, name: str, header: List[str], columns: List[np.ndarray]) -> Path:
        path = write_csv(self.output_dir / name, header, columns)
        self.files.append(path.name)
        logger.info("Wrote %s", path)
        return path


# Subcommands


def run_starkmap(ctx: RunContext) -> Dict:
    """Named-level energy offsets versus static field."""
    fields = ctx.sweep(SweepSection(start=0.0, stop=3.0, points=31)).values()
    options = {"defects": ctx.defects, "window": ctx.run.window} if ctx.run.model == "rb" else {}
    table = stark_map_table(ctx.run.n, fields * constants.V_PER_CM, ctx.run.model, **options)
    labels = [label for label in table if label != "field"]
    ctx.write(
        "starkmap.csv",
        ["F_V_per_cm"] + [f"{label}_over_2pi_MHz" for label in labels],
        [fields] + [table[label] / MHZ for label in labels],
    )
    return {"levels": labels, "max_abs_offset_MHz": float(max(np.max(np.abs(table[k])) for k in labels) / MHZ)}


def run_rabi(ctx: RunContext) -> Dict:
    """Populations versus rf pulse length."""
    sweep = ctx.sweep(SweepSection())
    durations = sweep.values() * constants.US
    envelope = PulseEnvelope(
        rise=0.0, fall=0.0, shape=ctx.run.shape, correction=ctx.run.correction
    )
    trajectory = rabi_scan(
        ctx.run.n, ctx.run.omega_rabi, ctx.delta, durations, ctx.run.model, envelope, ctx.workers, **ctx.model_options()
    )
    ctx.write("rabi.csv", *_trajectory_columns(trajectory))
    p_c = trajectory.level_populations().get("c", np.zeros(durations.size))
    peaks = count_maxima(p_c)
    spacing = float(np.mean(np.diff(durations[peaks])) / constants.NS) if peaks.size > 1 else None
    summary = {
        "delta_over_2pi_MHz": ctx.delta / MHZ,
        "peak_count": int(peaks.size),
        "first_peak_P_c": float(p_c[peaks[0]]) if peaks.size else float(np.max(p_c)),
        "peak_spacing_ns": spacing,
    }
    if ctx.config.run.atoms > 0:
        snapshots = {}
        for k, duration in enumerate(constants.SNAPSHOT_DURATIONS):
            index = int(np.argmin(np.abs(durations - duration)))
            estimates, errors = binomial_sample(trajectory.at(index), ctx.config.run.atoms, ctx.run.seed + k)
            snapshots[f"{durations[index] / constants.US:.3f}_us"] = {"populations": estimates, "errors": errors}
        summary["snapshots"] = snapshots
    if sweep.fit:
        result = rabi_scan_experiment(
            ctx.run.omega_rabi,
            durations,
            ctx.run.model,
            ctx.run.n,
            ctx.delta,
            ctx.run.correction,
            workers=ctx.workers,
            **ctx.model_options(),
        )
        summary["fit"] = {
            "omega_rabi_over_2pi_MHz": result.fit.parameters["omega_rabi"] / MHZ,
            "correction_ns": result.fit.parameters["correction"] / constants.NS,
            "flags": result.fit.flags,
        }
    return summary


def run_adiabatic(ctx: RunContext) -> Dict:
    """Adiabatic passage: transfer versus Rabi frequency and ionization spectra."""
    omegas = ctx.sweep(SweepSection(start=0.2, stop=3.5, points=8)).values() * MHZ
    ramp = FieldRamp(f_start=ctx.run.f_start, f_end=ctx.run.f_end, duration=ctx.run.ramp)
    options = dict(ramp=ramp, rise=ctx.run.rise, fall=ctx.run.fall, shape=ctx.run.shape, **ctx.model_options())
    scan = adiabatic_scan(ctx.run.n, omegas, ctx.run.model, ctx.workers, **options)
    labels = sorted({label for point in scan for label in point})
    ctx.write(
        "adiabatic_scan.csv",
        ["omega_rabi_over_2pi_MHz"] + labels,
        [omegas / MHZ] + [np.array([point.get(label, 0.0) for point in scan]) for label in labels],
    )
    result = adiabatic_experiment(ctx.run.n, ctx.run.omega_rabi, ctx.run.model, **options)
    ctx.write(
        "ionization_spectra.csv",
        ["ionization_field_arb", "signal_before", "signal_after"],
        [result.fields, result.spectrum_before, result.spectrum_after],
    )
    ladder = sum(result.populations.get(label, 0.0) for label in ("d", "e", "f", "g"))
    return {
        "omega_rabi_over_2pi_MHz": ctx.run.omega_rabi / MHZ,
        "P_c": result.populations.get("c", 0.0),
        "P_d_to_g": ladder,
        "populations": result.populations,
        "spectrum_transfer_efficiency": result.transfer_efficiency,
        "ionization_field_unit": constants.IONIZATION_FIELD_UNIT,
    }


def run_calibrate_polarization(ctx: RunContext) -> Dict:
    """Four-electrode polarization procedure against the simulated polarimeter."""
    pol = ctx.config.polarization
    if pol.transfer_matrix_file:
        transfer = TransferMatrix.load(Path(pol.transfer_matrix_file))
    elif pol.perturbed:
        transfer = TransferMatrix.perturbed(ctx.run.seed, pol.amplitude_spread, pol.phase_spread)
    else:
        transfer = TransferMatrix.ideal()
    result = optimize_polarization(
        transfer, noise=pol.noise, passes=pol.passes, repeats=pol.repeats, seed=ctx.run.seed
    )
    drives = drive_for_rabi(result.drives, transfer, ctx.run.omega_rabi, ctx.run.n)
    save_drives(drives, ctx.output_dir / "drives.txt")
    (ctx.output_dir / "audit.log").write_text("\n".join(result.audit_lines()) + "\n", encoding="utf-8")
    ctx.files.extend(["drives.txt", "audit.log"])
    e_plus, e_minus = field_at_center(drives, transfer)
    return {
        "purity": drive_purity(drives, transfer),
        "measurements": result.measurements,
        "E_plus_V_per_m": abs(e_plus),
        "E_minus_V_per_m": abs(e_minus),
        "measured_chain_purity": purity(ctx.run.omega_plus, ctx.run.omega_minus),
    }


def run_autler_townes(ctx: RunContext) -> Dict:
    """Autler-Townes doublet of i dressed by the sigma+ field."""
    detunings = ctx.sweep(SweepSection(start=-40.0, stop=40.0, points=801)).values() * MHZ
    e_plus = _field_for_rabi(ctx.run.omega_plus)
    result = autler_townes_experiment(e_plus, detunings)
    ctx.write("autler_townes.csv", ["probe_detuning_over_2pi_MHz", "signal"], [detunings / MHZ, result.spectrum])
    return {
        "omega_plus_over_2pi_MHz": result.omega_plus / MHZ,
        "splitting_over_2pi_MHz": result.fit.parameters["splitting"] / MHZ,
        "flags": result.fit.flags,
    }


def run_sigma_minus(ctx: RunContext) -> Dict:
    """Rabi oscillation driven by the residual sigma- component."""
    times = ctx.sweep(SweepSection(start=0.0, stop=10.0, points=501)).values() * constants.US
    e_minus = _field_for_rabi(ctx.run.omega_minus)
    result = sigma_minus_rabi_experiment(e_minus, times, atoms=ctx.config.run.atoms, seed=ctx.run.seed)
    columns = [times / constants.US, result.population]
    header = ["time_us", "P_i_prime"]
    if result.errors is not None:
        header.append("error")
        columns.append(result.errors)
    ctx.write("sigma_minus.csv", header, columns)
    omega = result.fit.parameters["omega"]
    return {
        "omega_minus_over_2pi_kHz": result.omega_minus / constants.TWO_PI / constants.KHZ,
        "fitted_over_2pi_kHz": omega / constants.TWO_PI / constants.KHZ,
        "half_period_us": float(np.pi / omega / constants.US) if omega > 0 else None,
        "flags": result.fit.flags,
    }


def _control_model(ctx: RunContext) -> ControlModel:
    if ctx.run.model == "rb":
        return rb_control_model(ctx.run.n, ctx.defects, ctx.run.window, ctx.run.ladder_depth, ctx.run.omega_rf)
    return hydrogen_control_model(ctx.run.n, ctx.run.omega_rf)


def run_optimize_pulse(ctx: RunContext) -> Dict:
    """Optimal-control schedules for the i -> c transfer."""
    opt = ctx.config.optimizer
    model = _control_model(ctx)
    baseline = fidelity(single_pulse_schedule(ctx.run.omega_rabi), model)
    if opt.schedule_file:
        start = load_schedule(Path(opt.schedule_file), ctx.run.omega_max, ctx.run.delta_max, ctx.run.budget)
        best = optimize(start, model, opt.method, opt.variable_durations, opt.max_iterations)
        fidelities, dispersion = [best.fidelity], 0.0
    else:
        template = PulseSchedule.uniform(
            opt.segments,
            ctx.run.budget,
            min(ctx.run.omega_rabi, ctx.run.omega_max),
            omega_max=ctx.run.omega_max,
            delta_max=ctx.run.delta_max,
            budget=ctx.run.budget,
        )
        report = multi_start(
            template,
            model,
            opt.starts,
            ctx.run.seed,
            opt.method,
            opt.variable_durations,
            opt.max_iterations,
            ctx.workers,
        )
        best, fidelities, dispersion = report.best, report.fidelities, report.dispersion
    save_schedule(best.schedule, ctx.output_dir / "schedule.csv")
    ctx.files.append("schedule.csv")
    ctx.write("fidelity_trace.csv", ["iteration", "fidelity"], [np.arange(len(best.fidelity_trace)), best.fidelity_trace])
    return {
        "baseline_fidelity": baseline,
        "fidelity": best.fidelity,
        "termination_reason": best.termination_reason,
        "iterations": best.iterations,
        "start_fidelities": fidelities,
        "dispersion": dispersion,
    }


def run_probe_calibration(ctx: RunContext) -> Dict:
    """Probe-efficiency calibration chain from adiabatically prepared levels."""
    result = probe_calibration_sequence(atoms=ctx.config.run.atoms, seed=ctx.run.seed)
    labels = sorted(result.eta)
    ctx.write(
        "probe_calibration.csv",
        ["level_index", "eta_estimate", "eta_true"],
        [np.arange(len(labels)), [result.eta[k] for k in labels], [result.true_eta[k] for k in labels]],
    )
    return {"levels": labels, "eta": result.eta, "true_eta": result.true_eta}


def run_simulate_schedule(ctx: RunContext) -> Dict:
    """Re-simulate an exported schedule."""
    opt = ctx.config.optimizer
    if not opt.schedule_file:
        raise ConfigError("simulate-schedule needs [optimizer] schedule_file")
    schedule = load_schedule(Path(opt.schedule_file), ctx.run.omega_max, ctx.run.delta_max, ctx.run.budget)
    model = _control_model(ctx)
    trajectory = simulate_schedule(schedule, model)
    ctx.write("schedule_trajectory.csv", *_trajectory_columns(trajectory))
    return {"fidelity": fidelity(schedule, model), "final": trajectory.final()}


def _field_for_rabi(omega: float) -> float:
    """Field amplitude giving ``omega`` on i -> i' with the default dipole."""
    return omega * CODATA.hbar / (np.sqrt(2.0) * constants.DEFAULT_DIPOLE)


def _trajectory_columns(trajectory) -> tuple:
    levels = trajectory.level_populations()
    return ["time_us"] + list(levels), [trajectory.times / constants.US] + list(levels.values())


COMMANDS: Dict[str, Callable[[RunContext], Dict]] = {
    "starkmap": run_starkmap,
    "rabi": run_rabi,
    "adiabatic": run_adiabatic,
    "calibrate-polarization": run_calibrate_polarization,
    "autler-townes": run_autler_townes,
    "sigma-minus": run_sigma_minus,
    "optimize-pulse": run_optimize_pulse,
    "probe-calibration": run_probe_calibration,
    "simulate-schedule": run_simulate_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rydberg-transfer",
        description="Simulate rf transfer of Rydberg atoms to the circular level.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__} constants {CODATA.constant_set_hash()}",
    )
    parser.add_argument("--log-level", default=None, help="Logging level (default from RYDBERG_LOG_LEVEL or INFO).")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads for sweeps.")
    parser.add_argument("--output-dir", type=Path, default=None, help="Directory for CSV and summary files.")
    parser.add_argument("--config", type=Path, default=None, help="INI run configuration.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        subparsers.add_parser(name, help=func.__doc__)
    return parser


def _output_dir(args: argparse.Namespace, config: Optional[RunConfig]) -> Path:
    if args.output_dir is not None:
        return args.output_dir
    if config is not None and config.run.output_dir:
        return Path(config.run.output_dir)
    return Path(env_default(constants.ENV_OUTPUT_DIR, constants.OUTPUT_DIR))


def run(args: argparse.Namespace) -> int:
    """Execute one subcommand; returns the exit status."""
    config = None
    output_dir = _output_dir(args, None)
    try:
        config = load_config(args.config)
        output_dir = _output_dir(args, config)
        workers = args.workers or config.run.workers or env_default(constants.ENV_WORKERS, constants.WORKERS)
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        output_dir.mkdir(parents=True, exist_ok=True)
        ctx = RunContext(args.command, config, config.resolve(), output_dir, workers, [])
        logger.info("Running %s (scenario %s, %s model)", args.command, config.run.scenario, config.run.model)
        results = COMMANDS[args.command](ctx)
        summary = {
            "status": "ok",
            "subcommand": args.command,
            "scenario": config.run.scenario,
            "version": __version__,
            "constants_hash": CODATA.constant_set_hash(),
            "config": config.model_dump(),
            "resolved": ctx.run.model_dump(),
            "results": results,
            "files": sorted(ctx.files),
        }
        save_json_file(output_dir / constants.SUMMARY_FILE, summary)
        return 0
    except (ConfigError, ValidationError) as e:
        return _report_error(args.command, output_dir, e, 2)
    except RydbergError as e:
        return _report_error(args.command, output_dir, e, 3)
    except Exception as e:
        logger.error("Unexpected error in %s: %s", args.command, e, exc_info=True)
        return _report_error(args.command, output_dir, e, 1)


def _report_error(command: str, output_dir: Path, error: Exception, status: int) -> int:
    record = {
        "status": "error",
        "error_type": type(error).__name__,
        "message": str(error),
        "subcommand": command,
    }
    logger.error("%s failed: %s", command, error)
    print(json.dumps(record, sort_keys=True))
    save_json_file(output_dir / constants.ERROR_FILE, record)
    return status


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
