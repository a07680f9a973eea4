#!/usr/bin/env python3
"""
Transmission Blockade Breakdown Simulator
=========================================

Batch command-line entry point. Subcommands:
- simulate:  mean-field (full or slow-manifold) or stochastic trajectory
- sweep:     transition width and integrated thermal photon number per drive,
             plus the power-law fit between them
- analyze:   transition times and photon statistics of existing CSV files
- fit-gamma: escape rate from the midpoint slope of a reference trace

Every command writes ``<command>_manifest.txt`` into ``--out``, even when it
fails; passing a manifest back as ``--config`` repeats the run.

Exit codes: 0 success (including analyses without a transition),
1 usage or configuration error, 2 numerical failure.
"""

import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import click
import pandas as pd
import structlog
from rich.console import Console
from rich.table import Table

from analysis import (
    IntensityTrace,
    align_midpoints,
    fit_gamma,
    fluctuations,
    intensity_fluctuations,
    moving_average,
    power_law_fit,
    scaling_sweep,
    slope_agreement,
    transition_report,
)
from core_model import PhysicalParams
from errors import EXIT_OK, EXIT_USAGE, BlockadeError, ConfigError, FitError, exit_code_for
from file_formats import (
    read_counts,
    read_trajectory,
    table_kind,
    write_counts,
    write_ensemble_mean,
    write_fluctuations,
    write_key_values,
    write_scaling_points,
    write_trajectory,
)
from log_config import configure_logging
from meanfield import initial_state, integrate_full, integrate_slow
from settings import (
    ParameterFile,
    RunDefaults,
    RunManifest,
    RunSection,
    load_defaults,
    load_parameter_file,
    resolve_physics,
)
from stochastic import StochasticConfig, ensemble_mean, ensemble_run, simulate_trajectory

__version__ = "0.3.0"

logger = structlog.get_logger(__name__)
console = Console()

# flags holding several values; a manifest stores them comma-joined
MULTI_VALUE_FLAGS = {"analyze": {"paths"}, "fit-gamma": {"checks"}}


@dataclass
class RunContext:
    """Resolved global options shared by the subcommands."""

    defaults: RunDefaults
    parameters: Optional[ParameterFile]
    out_dir: Path
    seed: int
    threads: int
    resolved: Dict[str, Any] = field(default_factory=dict)

    def physics(self, **overrides) -> PhysicalParams:
        params, values = resolve_physics(self.defaults, self.parameters, overrides)
        self.resolved = values
        return params


@contextmanager
def recorded_run(run: RunContext, command: str, flags: Dict[str, Any]) -> Iterator[RunManifest]:
    """Manifest that is written whatever happens inside the block."""
    manifest = RunManifest(command, __version__, run.seed)
    manifest.flags = {
        name: value for name, value in flags.items() if value is not None and value != ()
    }
    if run.parameters is not None and run.parameters.path:
        manifest.add_input(run.parameters.path)
    try:
        yield manifest
        manifest.status = "ok"
    except BaseException as exc:
        manifest.fail(exc)
        raise
    finally:
        manifest.parameters = run.resolved
        manifest.write(run.out_dir)


def _print_report(title: str, values: Dict[str, Any]) -> None:
    table = Table(title=title)
    table.add_column("quantity")
    table.add_column("value", justify="right")
    for key, value in values.items():
        table.add_row(key, "-" if value is None else (f"{value:.6g}" if isinstance(value, float) else str(value)))
    console.print(table)


def _n_ref(explicit: Optional[float], meta: Dict[str, Any], path: Path) -> float:
    n_ref = explicit if explicit is not None else meta.get("n_ref")
    if n_ref is None:
        raise ConfigError("n_ref", f"no --n-ref given and no n_ref in the sidecar of {path}")
    return float(n_ref)


def _replayed_flags(command: str, values: Dict[str, str]) -> Dict[str, Any]:
    multi = MULTI_VALUE_FLAGS.get(command, set())
    return {name: [part for part in value.split(",") if part] if name in multi else value
            for name, value in values.items()}


def _record_failed_setup(ctx: click.Context, exc: BaseException, config_path: Optional[str],
                         defaults_path: Optional[str], out_dir: Path) -> None:
    """Failed manifest for errors raised before any command starts."""
    manifest = RunManifest(ctx.invoked_subcommand or "blockade", __version__)
    for path in (defaults_path, config_path):
        if path:
            manifest.add_input(path)
    manifest.fail(exc)
    manifest.write(out_dir)


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Parameter file (key = value, frequencies in MHz) or a previous manifest.")
@click.option("--defaults", "defaults_path", type=click.Path(dir_okay=False), default=None,
              help="YAML run defaults (default: config/config.yml).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None, help="Master random seed.")
@click.option("--threads", type=click.IntRange(1), default=None, help="Worker threads.")
@click.option("--log-level", default=None, help="Log level, e.g. INFO or DEBUG.")
@click.pass_context
def cli(ctx, config_path, defaults_path, out_dir, seed, threads, log_level):
    """Simulate and analyze transmission blockade breakdown in a driven atom-cavity system."""
    defaults: Optional[RunDefaults] = None
    try:
        defaults = load_defaults(defaults_path)
        configure_logging(log_level or defaults.logging.level, defaults.logging.file)
        parameters = load_parameter_file(config_path) if config_path else None
    except BlockadeError as exc:
        fallback = defaults.run.out_dir if defaults is not None else RunSection().out_dir
        _record_failed_setup(ctx, exc, config_path, defaults_path, Path(out_dir or fallback))
        raise
    if parameters is not None and parameters.flags:
        ctx.default_map = {
            command: _replayed_flags(command, values) for command, values in parameters.flags.items()
        }
    ctx.obj = RunContext(
        defaults=defaults,
        parameters=parameters,
        out_dir=Path(out_dir or defaults.run.out_dir),
        seed=seed if seed is not None else (parameters.seed if parameters and parameters.seed is not None
                                             else defaults.run.seed),
        threads=threads or defaults.run.threads,
    )


@cli.command()
@click.option("--mode", type=click.Choice(["meanfield-full", "meanfield-slow", "stochastic"]), default=None)
@click.option("--t-end", type=float, default=None, help="Final time in us.")
@click.option("--output-dt", type=float, default=None, help="Output sampling in us.")
@click.option("--eta-over-kappa", type=float, default=None)
@click.option("--escape-over-gamma", type=float, default=None, help="Gamma in units of gamma.")
@click.option("--delta-c-mhz", type=float, default=None)
@click.option("--n-atoms", type=float, default=None, help="Mean-field atom number.")
@click.option("--budget", type=click.IntRange(1), default=None, help="Stochastic integer atom budget.")
@click.option("--n-traj", type=click.IntRange(1), default=None,
              help="Stochastic trajectories; more than one writes every member and their mean.")
@click.option("--freeze-populations/--no-freeze-populations", default=None)
@click.option("--name", default="trajectory", show_default=True, help="Output file stem.")
@click.pass_obj
def simulate(run: RunContext, mode, t_end, output_dt, eta_over_kappa, escape_over_gamma, delta_c_mhz,
             n_atoms, budget, n_traj, freeze_populations, name):
    """Integrate one trajectory from the blockaded initial state."""
    flags = click.get_current_context().params
    with recorded_run(run, "simulate", flags) as manifest:
        mode = mode or run.defaults.run.mode
        t_end = t_end or run.defaults.run.t_end_us
        params = run.physics(
            eta_over_kappa=eta_over_kappa,
            Gamma_over_gamma=escape_over_gamma,
            delta_C_mhz=delta_c_mhz,
            n_atoms=n_atoms,
        )
        controls = run.defaults.integrator.model_copy(
            update={k: v for k, v in {"output_dt": output_dt, "freeze_populations": freeze_populations}.items()
                    if v is not None}
        )
        meta = {"n_ref": params.empty_cavity_photons, "kappa": params.kappa, "mode": mode, "t_end": t_end}
        logger.info("simulate.start", mode=mode, t_end=t_end, eta_over_kappa=params.eta_over_kappa)

        if mode == "stochastic":
            cfg = run.defaults.stochastic.model_copy(
                update={"rng_seed": run.seed, "output_dt": controls.output_dt,
                        **({"n_atoms": budget} if budget else {})}
            )
            n_traj = n_traj or run.defaults.run.n_traj
            if n_traj > 1:
                trace = _simulate_ensemble(run, manifest, params, cfg, t_end, n_traj, name, meta)
                if trace is not None:
                    _print_report(f"{name} mean of {n_traj} ({mode})", transition_report(trace).as_dict())
                return EXIT_OK
            trajectory, record = simulate_trajectory(params, cfg, t_end)
            meta.update(seed=run.seed, n_atoms=cfg.n_atoms, dt_jump=cfg.dt_jump)
            counts_path = write_counts(record, run.out_dir / f"{name}_counts.csv", {
                "n_ref": params.empty_cavity_photons, "kappa": params.kappa, "mode": mode,
            })
            manifest.add_output(counts_path)
        elif mode == "meanfield-full":
            trajectory = integrate_full(params, initial_state(params), t_end, controls)
        else:
            trajectory = integrate_slow(params, initial_state(params), t_end, controls)
            for warning in trajectory.metadata.get("warnings", []):
                click.echo(f"warning: {warning}", err=True)

        path = write_trajectory(trajectory, run.out_dir / f"{name}.csv", meta)
        manifest.add_output(path)
        if params.empty_cavity_photons > 0:
            report = transition_report(IntensityTrace.from_trajectory(trajectory, params.empty_cavity_photons, name))
            _print_report(f"{name} ({mode})", report.as_dict())
    return EXIT_OK


def _simulate_ensemble(run: RunContext, manifest: RunManifest, params: PhysicalParams, cfg: StochasticConfig,
                      t_end: float, n_traj: int, name: str, meta: Dict[str, Any]) -> Optional[IntensityTrace]:
    """Members as ``<name>_<i>.csv`` with their counts, plus ``<name>_mean.csv``."""
    members = ensemble_run(params, cfg, t_end, n_traj, threads=run.threads, progress=True)
    count_meta = {"n_ref": params.empty_cavity_photons, "kappa": params.kappa, "mode": "stochastic"}
    for i, (trajectory, record) in enumerate(members):
        stem = f"{name}_{i:03d}"
        member_meta = {**meta, "seed": trajectory.metadata["seed"], "n_atoms": cfg.n_atoms, "dt_jump": cfg.dt_jump}
        manifest.add_output(write_trajectory(trajectory, run.out_dir / f"{stem}.csv", member_meta))
        manifest.add_output(write_counts(record, run.out_dir / f"{stem}_counts.csv", count_meta))
    summary = ensemble_mean(members)
    path = write_ensemble_mean(summary, run.out_dir / f"{name}_mean.csv",
                               {**meta, "seed": run.seed, "n_traj": n_traj, "n_atoms": cfg.n_atoms})
    manifest.add_output(path)
    if params.empty_cavity_photons <= 0:
        return None
    return IntensityTrace.from_ensemble_mean(summary, params.empty_cavity_photons, f"{name}_mean")


def _parse_drives(text: str) -> List[float]:
    try:
        drives = [float(item) for item in str(text).split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError("drives", f"'{text}' is not a comma-separated list of numbers") from exc
    if not drives:
        raise ConfigError("drives", "no drives given")
    return drives


@cli.command()
@click.option("--drives", default=None, help="Comma-separated eta/kappa values, ascending.")
@click.option("--mode", type=click.Choice(["stochastic", "meanfield"]), default="stochastic", show_default=True)
@click.option("--t-end", type=float, default=None, help="Final time in us (default: per-drive estimate).")
@click.option("--window", type=float, default=None, help="Fluctuation window in us.")
@click.option("--budget", type=click.IntRange(1), default=None, help="Stochastic integer atom budget.")
@click.option("--n-traj", type=click.IntRange(1), default=None, help="Stochastic trajectories per drive.")
@click.pass_obj
def sweep(run: RunContext, drives, mode, t_end, window, budget, n_traj):
    """Scaling points over drive powers and their power-law fit."""
    flags = click.get_current_context().params
    with recorded_run(run, "sweep", flags) as manifest:
        drive_list = _parse_drives(drives) if drives else list(run.defaults.run.drives)
        params = run.physics()
        analysis = run.defaults.analysis
        cfg = run.defaults.stochastic.model_copy(
            update={"rng_seed": run.seed, **({"n_atoms": budget} if budget else {})}
        )
        points = scaling_sweep(
            params,
            drive_list,
            cfg,
            mode=mode,
            t_end=t_end,
            window=window or analysis.window_us,
            smoothing=analysis.smoothing_us,
            controls=run.defaults.integrator,
            samples=analysis.sweep_samples,
            threads=run.threads,
            progress=True,
            repeats=n_traj or run.defaults.run.n_traj,
        )
        manifest.add_output(write_scaling_points(points, run.out_dir / "scaling.csv"))

        table = Table(title=f"scaling sweep ({mode})")
        for column in ("drive (photons)", "width (us)", "n_th", "excluded"):
            table.add_column(column, justify="right")
        for point in points:
            table.add_row(f"{point.drive:.4g}", f"{point.width:.4g}", f"{point.n_th_integrated:.4g}",
                          "yes" if point.excluded else "")
        console.print(table)

        usable = [point for point in points if point.usable]
        if len(usable) < 3:
            notice = f"power-law fit skipped: {len(usable)} usable point(s), at least 3 needed"
            click.echo(notice)
            manifest.notes["fit"] = "skipped"
            return EXIT_OK
        try:
            fit = power_law_fit(usable)
        except FitError as exc:
            click.echo(f"power-law fit skipped: {exc}")
            manifest.notes["fit"] = "skipped"
            return EXIT_OK
        report = fit.report()
        report["excluded_points"] = len(points) - len(usable)
        report["comparison_target_exponent"] = -1.9
        path = write_key_values(run.out_dir / "power_law_fit.txt", report, header="n_th_integrated vs width_us")
        manifest.add_output(path)
        _print_report("power-law fit", report)
    return EXIT_OK


@cli.command()
@click.argument("paths", nargs=-1, type=click.Path(dir_okay=False))
@click.option("--n-ref", type=float, default=None, help="Empty-cavity photon number (default: from sidecar).")
@click.option("--window", type=float, default=None, help="Fluctuation window in us.")
@click.option("--smoothing", type=float, default=None, help="Moving-average width in us before crossings.")
@click.option("--align", is_flag=True, default=False, help="Also write the midpoint-aligned family.")
@click.pass_obj
def analyze(run: RunContext, paths, n_ref, window, smoothing, align):
    """Transition times and photon statistics of trajectory or count CSV files."""
    ctx = click.get_current_context()
    paths = tuple(paths) or tuple(ctx.lookup_default("paths") or ())
    with recorded_run(run, "analyze", {**ctx.params, "paths": paths}) as manifest:
        if not paths:
            raise ConfigError("paths", "no input files given")
        analysis = run.defaults.analysis
        window = window or analysis.window_us
        traces = []
        for raw in paths:
            path = Path(raw)
            if not path.exists():
                raise ConfigError(str(path), "input file not found")
            manifest.add_input(path)
            kind = table_kind(path)
            if kind == "counts":
                record = read_counts(path)
                reference = _n_ref(n_ref, record.metadata, path)
                trace = IntensityTrace.from_counts(record, reference, path.stem)
                kappa = record.metadata.get("kappa")
                series = fluctuations(record, window, analysis.min_window_bins,
                                      kappa=float(kappa) if kappa else None)
                report = transition_report(trace, smoothing if smoothing is not None else window)
            else:
                trajectory = read_trajectory(path)
                reference = _n_ref(n_ref, trajectory.metadata, path)
                trace = IntensityTrace.from_trajectory(trajectory, reference, path.stem)
                series = None
                if window / trace.dt >= analysis.min_window_bins and trace.t.size >= window / trace.dt:
                    series = intensity_fluctuations(trace, window, analysis.min_window_bins)
                report = transition_report(trace, smoothing)
            traces.append(trace)

            manifest.add_output(write_key_values(run.out_dir / f"{path.stem}_transition.txt", report.as_dict()))
            if series is not None:
                manifest.add_output(write_fluctuations(series, run.out_dir / f"{path.stem}_fluctuations.csv",
                                                       {"window_us": window, "source": str(path)}))
            if not report.has_transition:
                click.echo(f"{path.name}: no transition (missing {', '.join(report.missing)})")
            _print_report(path.name, report.as_dict())

        if align:
            aligned = align_midpoints(traces, smoothing)
            frame = pd.DataFrame({"t_us": aligned[0].t})
            for trace in aligned:
                frame[trace.name] = trace.n
            target = run.out_dir / "aligned.csv"
            target.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(target, index=False, float_format="%.12g")
            manifest.add_output(target)
    return EXIT_OK


@cli.command("fit-gamma")
@click.argument("reference_path", type=click.Path(dir_okay=False))
@click.option("--gamma-min", type=float, default=None, help="Lower Gamma bound in units of gamma.")
@click.option("--gamma-max", type=float, default=None, help="Upper Gamma bound in units of gamma.")
@click.option("--n-ref", type=float, default=None, help="Empty-cavity photon number (default: from sidecar).")
@click.option("--check", "checks", multiple=True, type=click.Path(dir_okay=False),
              help="Further references whose midpoint slopes the fitted Gamma should reproduce.")
@click.pass_obj
def fit_gamma_command(run: RunContext, reference_path, gamma_min, gamma_max, n_ref, checks):
    """Fit the escape rate Gamma to the midpoint slope of a reference trace."""
    flags = click.get_current_context().params
    with recorded_run(run, "fit-gamma", flags) as manifest:
        analysis = run.defaults.analysis
        low, high = analysis.gamma_search
        low = gamma_min if gamma_min is not None else low
        high = gamma_max if gamma_max is not None else high

        def load(raw: str) -> IntensityTrace:
            path = Path(raw)
            if not path.exists():
                raise ConfigError(str(path), "input file not found")
            manifest.add_input(path)
            if table_kind(path) == "counts":
                record = read_counts(path)
                trace = IntensityTrace.from_counts(record, _n_ref(n_ref, record.metadata, path), path.stem)
                smoothed = moving_average(trace.n, int(round(analysis.window_us / trace.dt)))
                return IntensityTrace(trace.t, smoothed, trace.n_ref, trace.name)
            trajectory = read_trajectory(path)
            return IntensityTrace.from_trajectory(trajectory, _n_ref(n_ref, trajectory.metadata, path), path.stem)

        reference = load(reference_path)
        params = run.physics()
        result = fit_gamma(
            reference,
            params,
            search=(low * params.gamma, high * params.gamma),
            controls=run.defaults.integrator,
            profile_points=analysis.profile_points,
            tol=analysis.fit_tol,
        )
        report = result.report()
        report.update({"search_low_over_gamma": low, "search_high_over_gamma": high})
        if checks:
            fitted = params.model_copy(update={"Gamma": result.Gamma})
            for raw, mismatch in zip(checks, slope_agreement(fitted, [load(c) for c in checks],
                                                              run.defaults.integrator)):
                report[f"check.{Path(raw).stem}.slope_mismatch"] = mismatch
        for i, (Gamma, residual) in enumerate(result.profile):
            report[f"profile.{i}"] = f"{Gamma:.6g},{residual:.6g}"
        manifest.add_output(write_key_values(run.out_dir / "fit_gamma.txt", report, header="escape-rate fit"))
        _print_report("fit-gamma", {k: v for k, v in report.items() if not k.startswith("profile.")})
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map failures onto exit codes."""
    try:
        cli.main(args=argv, prog_name="blockade", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except BlockadeError as exc:
        logger.error("command_failed", error=str(exc), error_type=type(exc).__name__)
        click.echo(f"error: {exc}", err=True)
        return exit_code_for(exc)
    except ValueError as exc:
        logger.error("command_failed", error=str(exc), error_type=type(exc).__name__)
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except Exception as exc:
        logger.exception("command_crashed")
        click.echo(f"error: {exc}", err=True)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
