#!/usr/bin/env python3
"""
Acceptance Evaluation
=====================

Runs the acceptance checks of the simulator as named experiments:
1. Loads the run defaults
2. Executes each check, timing it and catching failures
3. Prints a summary table
4. Writes a JSON report

Usage:
    python evaluation/acceptance.py [--quick] [--report acceptance_report.json]
"""

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
import numpy as np
import structlog
from rich.console import Console
from rich.table import Table

sys.path.append(str(Path(__file__).parent.parent))

from analysis import (  # noqa: E402
    IntensityTrace,
    fit_gamma,
    fluctuations,
    power_law_fit_arrays,
    simulate_reference,
    slope_agreement,
    synthetic_displaced_thermal_counts,
    transition_report,
)
from core_model import (  # noqa: E402
    PhysicalParams,
    dispersive_shift,
    effective_shift_atoms,
    lorentzian_transmission,
    rad_per_us_to_mhz,
)
from log_config import configure_logging  # noqa: E402
from meanfield import (  # noqa: E402
    IntegratorControls,
    initial_state,
    integrate_full,
    integrate_slow,
    output_grid,
    steady_state,
    transition_time_estimate,
)
from stochastic import StochasticConfig, ensemble_mean, ensemble_run, simulate_trajectory  # noqa: E402

logger = structlog.get_logger(__name__)

# drives spanning two decades of empty-cavity photon number
FAMILY_DRIVES = (10.0, math.sqrt(1000.0), 100.0)
FAST_DRIVE = math.sqrt(3000.0)


@dataclass
class CheckResult:
    """Outcome of one acceptance check"""
    check_id: int
    title: str
    passed: bool
    runtime_s: float
    measured: Dict[str, Any] = field(default_factory=dict)
    notes: str = ""


@dataclass
class SuiteSummary:
    """Totals over the executed checks"""
    total: int
    passed: int
    failed: int
    runtime_s: float
    quick: bool


def dispersive_limit(params: PhysicalParams) -> PhysicalParams:
    """Same single-atom shift, atoms detuned a hundred times further."""
    return PhysicalParams.experiment_defaults(
        delta_A_mhz=100 * rad_per_us_to_mhz(params.delta_A), g_mhz=10 * rad_per_us_to_mhz(params.g)
    )


class AcceptanceEvaluator:
    """
    Runs the acceptance checks against the experimental parameter set
    """

    def __init__(self, quick: bool = False, seed: int = 2024, threads: int = 1):
        self.quick = quick
        self.seed = seed
        self.threads = threads
        self.params = PhysicalParams.experiment_defaults()
        self.controls = IntegratorControls()
        self.results: List[CheckResult] = []
        self.start_time: Optional[datetime] = None

    def checks(self) -> List[tuple]:
        fast = [
            (1, "dispersive shift", self.check_dispersive_shift),
            (2, "blockade depth", self.check_blockade_depth),
            (4, "two-timescale integrity", self.check_two_timescales),
            (5, "population conservation", self.check_conservation),
            (6, "fluctuation estimator recovery", self.check_estimator),
            (8, "power-law pipeline", self.check_power_law),
        ]
        slow = [
            (3, "drive-family phenomenology", self.check_family),
            (7, "escape-rate fit round trip", self.check_gamma_fit),
            (9, "stochastic consistency", self.check_stochastic),
            (10, "fluctuation peak", self.check_fluctuation_peak),
        ]
        selected = fast if self.quick else fast + slow
        return sorted(selected, key=lambda item: item[0])

    def run_check(self, check_id: int, title: str, check: Callable[[], tuple]) -> CheckResult:
        logger.info("check.start", check_id=check_id, title=title)
        started = time.perf_counter()
        try:
            passed, measured = check()
            notes = ""
        except Exception as e:
            logger.error("check.error", check_id=check_id, error=str(e))
            passed, measured, notes = False, {}, f"{type(e).__name__}: {e}"
        result = CheckResult(check_id, title, bool(passed), time.perf_counter() - started, measured, notes)
        logger.info("check.done", check_id=check_id, passed=result.passed, runtime_s=round(result.runtime_s, 3))
        return result

    def run_all(self) -> SuiteSummary:
        self.start_time = datetime.now()
        for check_id, title, check in self.checks():
            self.results.append(self.run_check(check_id, title, check))
        passed = sum(r.passed for r in self.results)
        return SuiteSummary(
            total=len(self.results),
            passed=passed,
            failed=len(self.results) - passed,
            runtime_s=sum(r.runtime_s for r in self.results),
            quick=self.quick,
        )

    # --- checks -----------------------------------------------------------

    def check_dispersive_shift(self):
        shift_khz = abs(rad_per_us_to_mhz(dispersive_shift(self.params))) * 1e3
        return abs(shift_khz - 3.0) / 3.0 <= 0.05, {"shift_khz": shift_khz}

    def check_blockade_depth(self):
        delta = dispersive_shift(self.params)
        depth = lorentzian_transmission(self.params, 1e4, delta)
        far = dispersive_limit(self.params)
        N_g = far.n_atoms_total
        a, _ = steady_state(far, N_g, 0.0)
        relative = abs(a) ** 2 / far.empty_cavity_photons
        formula = lorentzian_transmission(far, effective_shift_atoms(far, N_g, 0.0), dispersive_shift(far))
        agreement = abs(relative / formula - 1.0)
        return depth <= 1.1e-2 and agreement <= 0.01, {"depth": depth, "steady_state_vs_formula": agreement}

    def _family(self) -> List[IntensityTrace]:
        traces = []
        for eta_over_kappa in FAMILY_DRIVES:
            drive = self.params.with_drive(eta_over_kappa)
            traces.append(simulate_reference(drive, 3.0 * transition_time_estimate(drive),
                                             controls=self.controls, name=f"{eta_over_kappa:.3g}"))
        return traces

    def check_family(self):
        widths, plateaus, finals, monotone = [], [], [], True
        for trace in self._family():
            report = transition_report(trace)
            if not report.has_transition:
                return False, {"missing": report.missing}
            widths.append(report.width)
            early = trace.n[trace.t <= 0.1 * report.t50]
            plateaus.append(float(early.max() / trace.n_ref))
            finals.append(float(trace.n[-1] / trace.n_ref))
            monotone &= bool(np.all(np.diff(trace.n) >= -1e-6 * trace.n_ref))
        decreasing = all(b < a for a, b in zip(widths, widths[1:]))
        passed = decreasing and monotone and max(plateaus) <= 0.02 and min(finals) >= 0.95
        return passed, {"widths_us": widths, "plateaus": plateaus, "finals": finals, "monotone": monotone}

    def check_two_timescales(self):
        t_end = 1e3 / self.params.kappa
        grid = output_grid(t_end, 0.5)
        full = integrate_full(self.params, initial_state(self.params), t_end, self.controls, t_eval=grid)
        slow = integrate_slow(self.params, initial_state(self.params), t_end, self.controls, t_eval=grid)
        settled = grid >= 10.0
        deviation = float(np.max(np.abs(full.intensity[settled] / slow.intensity[settled] - 1.0)))
        return deviation <= 0.02, {"max_relative_deviation": deviation}

    def check_conservation(self):
        closed = self.params.with_escape(0.0)
        t_end = 3.0 * transition_time_estimate(self.params)
        trajectory = integrate_slow(closed, initial_state(closed), t_end, self.controls)
        drift = float(np.max(np.abs(trajectory.population / closed.n_atoms_total - 1.0)))
        leaking = integrate_slow(self.params, initial_state(self.params), t_end, self.controls)
        rise = float(np.max(np.diff(leaking.population)))
        passed = drift < 1e-6 and rise <= 1e-9 * self.params.n_atoms_total
        return passed, {"closed_drift": drift, "largest_increase": rise}

    def check_estimator(self):
        rng = np.random.default_rng(self.seed)
        recovered = {}
        passed = True
        for beta_sq, n_th, bins in ((20.0, 5.0, 100_000), (100.0, 1.0, 100_000), (0.0, 10.0, 1_000_000)):
            record = synthetic_displaced_thermal_counts(beta_sq, n_th, bins, rng)
            estimate = float(fluctuations(record, window=float(bins)).n_th[0])
            recovered[f"{beta_sq:g},{n_th:g}"] = estimate
            passed &= abs(estimate / n_th - 1.0) <= 0.10
        rate = 500.0
        counts = synthetic_displaced_thermal_counts(rate / (2.0 * self.params.kappa), 0.0, 100_000, rng,
                                                    kappa=self.params.kappa)
        series = fluctuations(counts, window=100_000.0)
        mu = float(np.mean(counts.counts))
        sigma = math.sqrt((mu + 2 * mu ** 2) / len(counts)) / mu ** 2
        poisson_ok = abs(series.g2_raw[0] - 1.0) <= 5 * sigma
        recovered["poisson_g2_minus_1_over_sigma"] = float((series.g2_raw[0] - 1.0) / sigma)
        return passed and poisson_ok, recovered

    def check_power_law(self):
        rng = np.random.default_rng(self.seed)
        x = np.geomspace(1.0, 100.0, 20)
        exact = power_law_fit_arrays(x, x ** -1.9).exponent
        worst = 0.0
        for _ in range(100):
            noisy = x ** -1.9 * (1.0 + 0.05 * rng.standard_normal(x.size))
            worst = max(worst, abs(power_law_fit_arrays(x, noisy).exponent + 1.9))
        passed = abs(exact + 1.9) < 1e-5 and worst <= 0.05
        return passed, {"exact_exponent": exact, "worst_noisy_deviation": worst}

    def check_gamma_fit(self):
        references = self._family()
        middle = references[1]
        fit = fit_gamma(middle, self.params, controls=self.controls)
        error = abs(fit.Gamma / self.params.Gamma - 1.0)
        fitted = self.params.model_copy(update={"Gamma": fit.Gamma})
        mismatches = slope_agreement(fitted, [references[0], references[2]], self.controls)
        passed = error <= 0.02 and max(mismatches) <= 0.10
        return passed, {"Gamma_relative_error": error, "slope_mismatch": mismatches}

    def check_stochastic(self):
        drive = self.params.with_drive(FAST_DRIVE)
        t_end = 3.0 * transition_time_estimate(drive)
        grid = output_grid(t_end, t_end / 200)
        cfg = StochasticConfig(n_atoms=20_000, rng_seed=self.seed)
        members = ensemble_run(drive, cfg, t_end, 200, threads=self.threads, t_eval=grid)
        summary = ensemble_mean(members)
        mean, stderr = summary["mean_photons"].to_numpy(), summary["stderr_photons"].to_numpy()
        reference = integrate_slow(drive, initial_state(drive), t_end, self.controls, t_eval=grid).intensity
        band = 3.0 * stderr + 1e-3 * drive.empty_cavity_photons
        within = bool(np.all(np.abs(mean - reference) <= band))
        repeat = ensemble_run(drive, cfg, t_end, 4, threads=max(2, self.threads), t_eval=grid)
        identical = all(np.array_equal(a.intensity, b.intensity) and np.array_equal(ca.counts, cb.counts)
                        for (a, ca), (b, cb) in zip(members[:4], repeat))
        worst = float(np.max(np.abs(mean - reference) / band))
        return within and identical, {"worst_deviation_over_band": worst, "thread_independent": identical}

    def check_fluctuation_peak(self):
        drive = self.params.with_drive(FAST_DRIVE)
        t_end = 3.0 * transition_time_estimate(drive)
        trajectory, record = simulate_trajectory(drive, StochasticConfig(rng_seed=self.seed), t_end,
                                                 t_eval=output_grid(t_end, t_end / 2000))
        report = transition_report(IntensityTrace.from_trajectory(trajectory, drive.empty_cavity_photons))
        series = fluctuations(record, kappa=drive.kappa)
        peak_time, peak = series.peak()
        early = series.n_th[(series.t < 0.5 * report.t10) & np.isfinite(series.n_th)]
        baseline = float(np.mean(early)) if early.size else 0.0
        inside = report.t10 <= peak_time <= report.t90
        ratio = peak / baseline if baseline > 0 else math.inf
        return inside and ratio >= 5.0, {"peak_time_us": peak_time, "t10_us": report.t10, "t90_us": report.t90,
                                         "peak_over_baseline": ratio}

    # --- reporting --------------------------------------------------------

    def print_summary(self, summary: SuiteSummary, console: Console) -> None:
        table = Table(title="acceptance checks" + (" (quick)" if self.quick else ""))
        table.add_column("#", justify="right")
        table.add_column("check")
        table.add_column("result")
        table.add_column("runtime (s)", justify="right")
        table.add_column("notes")
        for r in self.results:
            table.add_row(str(r.check_id), r.title, "PASS" if r.passed else "FAIL", f"{r.runtime_s:.1f}", r.notes)
        console.print(table)
        console.print(f"{summary.passed}/{summary.total} checks passed in {summary.runtime_s:.1f} s")

    def save_report(self, path: Path, summary: SuiteSummary) -> None:
        data = {
            "metadata": {
                "evaluation_date": datetime.now().isoformat(),
                "seed": self.seed,
                "quick": self.quick,
            },
            "summary": asdict(summary),
            "results": [asdict(r) for r in self.results],
        }
        path.write_text(json.dumps(data, indent=2, default=float), encoding="utf-8")
        logger.info("report.saved", path=str(path))


@click.command()
@click.option("--quick", is_flag=True, help="Only the checks that finish in seconds.")
@click.option("--report", "report_path", default="acceptance_report.json", show_default=True)
@click.option("--seed", default=2024, show_default=True)
@click.option("--threads", default=1, show_default=True)
def main(quick: bool, report_path: str, seed: int, threads: int) -> None:
    """Run the acceptance checks and write a JSON report."""
    configure_logging("INFO")
    evaluator = AcceptanceEvaluator(quick=quick, seed=seed, threads=threads)
    summary = evaluator.run_all()
    evaluator.print_summary(summary, Console())
    evaluator.save_report(Path(report_path), summary)
    sys.exit(0 if summary.failed == 0 else 1)


if __name__ == "__main__":
    main()
