"""
Measurement Pipeline
====================

Turns simulated (or recorded) transmission into the quantities that are
compared across drive powers:

- 10/50/90 % crossing times and the transition width
- midpoint alignment of a family of traces
- sliding-window photon statistics: g2(0) and the thermal photon number of a
  displaced thermal state, n_th = <n> (1 - sqrt(2 - g2))
- fitting the escape rate Gamma to the midpoint slope
- power-law regression of n_th against transition width
- the drive sweep that produces those scaling points
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from joblib import Parallel, delayed
from scipy import stats
from scipy.integrate import trapezoid
from scipy.optimize import minimize_scalar
from tqdm import tqdm

from core_model import PhysicalParams
from errors import BracketingError, FitError, NoMidpointError, NoTransitionError
from meanfield import (
    IntegratorControls,
    Trajectory,
    initial_state,
    integrate_slow,
    output_grid,
    transition_time_estimate,
)
from stochastic import CountRecord, StochasticConfig, derive_seed, simulate_trajectory

logger = structlog.get_logger(__name__)

THRESHOLDS = {"t10": 0.1, "t50": 0.5, "t90": 0.9}
FLUCTUATION_COLUMNS = ["t_us", "mean_n", "g2_raw", "g2_clamped", "n_th"]
SCALING_COLUMNS = [
    "drive_photons",
    "width_us",
    "n_th_integrated",
    "n_th_time_integral",
    "eta_over_kappa",
    "t10_us",
    "t50_us",
    "t90_us",
    "seed",
    "excluded",
]
DEFAULT_WINDOW_US = 500.0
MIN_WINDOW_BINS = 10
SWEEP_SAMPLES = 2000


@dataclass(frozen=True)
class IntensityTrace:
    """Photon number on a uniform time grid, with the empty-cavity reference (eta/kappa)^2."""

    t: np.ndarray
    n: np.ndarray
    n_ref: float
    name: str = "trace"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        n = np.asarray(self.n, dtype=float)
        if t.ndim != 1 or t.shape != n.shape:
            raise ValueError(f"trace '{self.name}': t and n must be 1-D and of equal length")
        if t.size < 2:
            raise ValueError(f"trace '{self.name}' needs at least two samples")
        steps = np.diff(t)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-6, atol=0.0):
            raise ValueError(f"trace '{self.name}' is not uniformly sampled")
        if np.any(n < 0):
            raise ValueError(f"trace '{self.name}' has negative photon numbers")
        if not self.n_ref > 0:
            raise ValueError(f"trace '{self.name}': n_ref must be positive")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "n", n)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def shifted(self, offset: float) -> "IntensityTrace":
        return IntensityTrace(self.t + offset, self.n, self.n_ref, self.name)

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory, n_ref: float, name: str = "trace") -> "IntensityTrace":
        """Intracavity photons of a trajectory; a trailing partial sample is dropped."""
        t, n = trajectory.t, trajectory.intensity
        if t.size > 2 and not math.isclose(t[-1] - t[-2], t[1] - t[0], rel_tol=1e-6):
            t, n = t[:-1], n[:-1]
        return cls(t, n, n_ref, name)

    @classmethod
    def from_ensemble_mean(cls, frame: pd.DataFrame, n_ref: float, name: str = "mean") -> "IntensityTrace":
        """Mean photon number of an ensemble table; a trailing partial sample is dropped."""
        t, n = frame["t_us"].to_numpy(dtype=float), frame["mean_photons"].to_numpy(dtype=float)
        if t.size > 2 and not math.isclose(t[-1] - t[-2], t[1] - t[0], rel_tol=1e-6):
            t, n = t[:-1], n[:-1]
        return cls(t, n, n_ref, name)

    @classmethod
    def from_counts(cls, record: CountRecord, n_ref: float, name: str = "counts") -> "IntensityTrace":
        """Calibrated photon-number estimate from a count record."""
        return cls(record.t, record.photons, n_ref, name)


@dataclass(frozen=True)
class TransitionReport:
    """
    First-crossing times of 10/50/90 % of n_ref

    A missing threshold is ``None`` and listed in ``missing``; such a report
    is the explicit "no transition" result.
    """

    t10: Optional[float]
    t50: Optional[float]
    t90: Optional[float]
    n_ref: float
    smoothing_us: Optional[float] = None
    missing: Tuple[str, ...] = ()

    @property
    def has_transition(self) -> bool:
        return not self.missing

    @property
    def width(self) -> Optional[float]:
        if self.t10 is None or self.t90 is None:
            return None
        return self.t90 - self.t10

    def as_dict(self) -> Dict[str, Any]:
        return {
            "transition": self.has_transition,
            "t10_us": self.t10,
            "t50_us": self.t50,
            "t90_us": self.t90,
            "width_us": self.width,
            "n_ref": self.n_ref,
            "smoothing_us": self.smoothing_us,
            "missing": ",".join(self.missing) if self.missing else None,
        }


@dataclass(frozen=True)
class FluctuationSeries:
    """Sliding-window photon statistics; g2 and n_th are NaN where the window mean is zero."""

    t: np.ndarray
    mean_n: np.ndarray
    g2_raw: np.ndarray
    g2_clamped: np.ndarray
    n_th: np.ndarray
    window: float

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def g2(self) -> np.ndarray:
        return self.g2_raw

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t_us": self.t,
                "mean_n": self.mean_n,
                "g2_raw": self.g2_raw,
                "g2_clamped": self.g2_clamped,
                "n_th": self.n_th,
            },
            columns=FLUCTUATION_COLUMNS,
        )

    def peak(self) -> Tuple[float, float]:
        """Time and value of the largest finite n_th."""
        finite = np.isfinite(self.n_th)
        if not np.any(finite):
            return math.nan, math.nan
        index = int(np.nanargmax(np.where(finite, self.n_th, -np.inf)))
        return float(self.t[index]), float(self.n_th[index])


@dataclass(frozen=True)
class ScalingPoint:
    """One drive of a sweep: width and the two integrated-n_th conventions."""

    drive: float
    width: float
    n_th_integrated: float
    n_th_time_integral: float = math.nan
    eta_over_kappa: float = math.nan
    t10: float = math.nan
    t50: float = math.nan
    t90: float = math.nan
    seed: Optional[int] = None
    excluded: bool = False

    @property
    def usable(self) -> bool:
        values = (self.drive, self.width, self.n_th_integrated)
        return not self.excluded and all(np.isfinite(v) and v > 0 for v in values)

    def as_row(self) -> Dict[str, Any]:
        return {
            "drive_photons": self.drive,
            "width_us": self.width,
            "n_th_integrated": self.n_th_integrated,
            "n_th_time_integral": self.n_th_time_integral,
            "eta_over_kappa": self.eta_over_kappa,
            "t10_us": self.t10,
            "t50_us": self.t50,
            "t90_us": self.t90,
            "seed": self.seed,
            "excluded": int(self.excluded),
        }


@dataclass
class PowerLawFit:
    """y = amplitude * x ** exponent, fitted as a line in log-log coordinates."""

    exponent: float
    exponent_stderr: float
    amplitude: float
    intercept_stderr: float
    r_value: float
    n_points: int
    excluded_points: int = 0
    log_residuals: List[float] = field(default_factory=list)

    def report(self) -> Dict[str, Any]:
        return {
            "exponent": self.exponent,
            "exponent_stderr": self.exponent_stderr,
            "amplitude": self.amplitude,
            "n_points": self.n_points,
            "excluded_points": self.excluded_points,
            "r_value": self.r_value,
            "log_residual_rms": float(np.sqrt(np.mean(np.square(self.log_residuals))))
            if self.log_residuals
            else 0.0,
        }


@dataclass
class GammaFit:
    """Best escape rate and the slope residual behind it."""

    Gamma: float
    Gamma_over_gamma: float
    residual: float
    reference_slope: float
    fitted_slope: float
    evaluations: int
    profile: List[Tuple[float, float]] = field(default_factory=list)

    def report(self) -> Dict[str, Any]:
        info = asdict(self)
        info.pop("profile")
        info["profile_points"] = len(self.profile)
        return info


def moving_average(values: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average over ``width`` samples, shrinking at the edges."""
    if width <= 1:
        return np.asarray(values, dtype=float)
    series = pd.Series(np.asarray(values, dtype=float))
    return series.rolling(int(width), center=True, min_periods=1).mean().to_numpy()


def _first_crossing(t: np.ndarray, n: np.ndarray, level: float) -> Optional[float]:
    above = n >= level
    candidates = np.nonzero(above[1:] & ~above[:-1])[0]
    if candidates.size == 0:
        return None
    i = int(candidates[0])
    fraction = (level - n[i]) / (n[i + 1] - n[i])
    return float(t[i] + fraction * (t[i + 1] - t[i]))


def transition_report(trace: IntensityTrace, smoothing: Optional[float] = None) -> TransitionReport:
    """
    Crossing times of 0.1, 0.5 and 0.9 n_ref

    Each time is the first sample interval where the trace goes from below to
    at-or-above the level, interpolated linearly. ``smoothing`` (us) applies a
    centered moving average first.
    """
    n = trace.n
    if smoothing:
        n = moving_average(n, int(round(smoothing / trace.dt)))
    times = {name: _first_crossing(trace.t, n, level * trace.n_ref) for name, level in THRESHOLDS.items()}
    missing = tuple(name for name, value in times.items() if value is None)
    if missing:
        logger.info("transition_report.no_transition", trace=trace.name, missing=missing)
    return TransitionReport(
        t10=times["t10"],
        t50=times["t50"],
        t90=times["t90"],
        n_ref=trace.n_ref,
        smoothing_us=smoothing,
        missing=missing,
    )


def align_midpoints(traces: Sequence[IntensityTrace], smoothing: Optional[float] = None) -> List[IntensityTrace]:
    """
    Shift every trace so its 50 % crossing sits at t = 0

    The results share one grid: spacing is the finest input spacing, 0 is a
    grid point and the span is the overlap of all shifted traces.

    Raises:
        NoMidpointError: A trace never crosses n_ref / 2
    """
    if not traces:
        return []
    midpoints = []
    for trace in traces:
        t50 = transition_report(trace, smoothing).t50
        if t50 is None:
            raise NoMidpointError(trace.name)
        midpoints.append(t50)

    dt = min(trace.dt for trace in traces)
    start = max(trace.t[0] - t50 for trace, t50 in zip(traces, midpoints))
    stop = min(trace.t[-1] - t50 for trace, t50 in zip(traces, midpoints))
    first, last = math.ceil(start / dt - 1e-9), math.floor(stop / dt + 1e-9)
    grid = dt * np.arange(first, last + 1)
    return [
        IntensityTrace(grid, np.interp(grid, trace.t - t50, trace.n), trace.n_ref, trace.name)
        for trace, t50 in zip(traces, midpoints)
    ]


def thermal_photon_number(mean_n, g2):
    """n_th = <n> (1 - sqrt(2 - g2)) with g2 clamped to [1, 2]."""
    g2 = np.clip(np.asarray(g2, dtype=float), 1.0, 2.0)
    value = np.asarray(mean_n, dtype=float) * (1.0 - np.sqrt(2.0 - g2))
    return float(value) if value.ndim == 0 else value


def displaced_thermal_g2(beta_sq, n_th):
    """g2(0) = 2 - |beta|^4 / (n_th + |beta|^2)^2; 1 for the vacuum."""
    beta_sq = np.asarray(beta_sq, dtype=float)
    n_th = np.asarray(n_th, dtype=float)
    total = beta_sq + n_th
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.where(total > 0, 2.0 - beta_sq ** 2 / np.where(total > 0, total, 1.0) ** 2, 1.0)
    return float(value) if value.ndim == 0 else value


def _window_bins(window: float, spacing: float, min_bins: int) -> int:
    bins = int(round(window / spacing))
    if bins < min_bins:
        raise ValueError(f"window of {window} us holds {bins} bins, fewer than the minimum {min_bins}")
    return bins


def _windowed(values: np.ndarray, t: np.ndarray, spacing: float, bins: int, stride: int):
    series = pd.Series(values)
    rolling = series.rolling(bins)
    mean = rolling.mean().to_numpy()[bins - 1 :: stride]
    var = rolling.var(ddof=1).to_numpy()[bins - 1 :: stride]
    centers = t[: t.size - bins + 1 : stride] + 0.5 * bins * spacing
    return centers, mean, var


def fluctuations(
    record: CountRecord,
    window: float = DEFAULT_WINDOW_US,
    min_bins: int = MIN_WINDOW_BINS,
    stride: int = 1,
    kappa: Optional[float] = None,
) -> FluctuationSeries:
    """
    Sliding-window g2(0) and thermal photon number from detected counts

    Per window: counts mean mu and variance v, g2 = 1 + (v - mu) / mu^2,
    <n> = mu * calibration and n_th from the clamped g2.

    Args:
        record (CountRecord): Binned counts
        window (float): Window length in us
        min_bins (int): Smallest acceptable number of bins per window
        stride (int): Step between consecutive windows, in bins
        kappa (float): Cavity decay rate, for the bin-time validity check
    """
    bins = _window_bins(window, record.bin_time, min_bins)
    if len(record) < bins:
        raise ValueError(f"record of {len(record)} bins is shorter than the {bins}-bin window")
    if kappa is not None and kappa * record.bin_time > 1.0:
        logger.warning(
            "bin_time_exceeds_field_correlation",
            kappa_tau=kappa * record.bin_time,
            bin_time=record.bin_time,
        )
    centers, mu, var = _windowed(record.counts.astype(float), record.t, record.bin_time, bins, stride)
    with np.errstate(divide="ignore", invalid="ignore"):
        g2_raw = np.where(mu > 0, 1.0 + (var - mu) / mu ** 2, np.nan)
    mean_n = mu * record.calibration
    g2_clamped = np.clip(g2_raw, 1.0, 2.0)
    return FluctuationSeries(
        t=centers,
        mean_n=mean_n,
        g2_raw=g2_raw,
        g2_clamped=g2_clamped,
        n_th=thermal_photon_number(mean_n, g2_clamped),
        window=window,
    )


def intensity_fluctuations(
    trace: IntensityTrace,
    window: float = DEFAULT_WINDOW_US,
    min_bins: int = MIN_WINDOW_BINS,
    stride: int = 1,
) -> FluctuationSeries:
    """Same windowed statistics on a noiseless photon-number series: g2 = 1 + v / mu^2."""
    bins = _window_bins(window, trace.dt, min_bins)
    if trace.t.size < bins:
        raise ValueError(f"trace of {trace.t.size} samples is shorter than the {bins}-sample window")
    centers, mu, var = _windowed(trace.n, trace.t, trace.dt, bins, stride)
    with np.errstate(divide="ignore", invalid="ignore"):
        g2_raw = np.where(mu > 0, 1.0 + var / mu ** 2, np.nan)
    g2_clamped = np.clip(g2_raw, 1.0, 2.0)
    return FluctuationSeries(
        t=centers,
        mean_n=mu,
        g2_raw=g2_raw,
        g2_clamped=g2_clamped,
        n_th=thermal_photon_number(mu, g2_clamped),
        window=window,
    )


def synthetic_displaced_thermal_counts(
    beta_sq: float,
    n_th: float,
    n_bins: int,
    rng: np.random.Generator,
    kappa: float = 2.0 * math.pi * 3.22,
    efficiency: float = 1.0,
    bin_time: float = 1.0,
) -> CountRecord:
    """
    Counts from a displaced thermal field

    The field of each bin is beta + xi with xi complex Gaussian, <|xi|^2> = n_th;
    its intensity is then detected with Poisson statistics.
    """
    xi = math.sqrt(n_th / 2.0) * (rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins))
    photons = np.abs(math.sqrt(beta_sq) + xi) ** 2
    rate = efficiency * 2.0 * kappa * bin_time
    return CountRecord(
        t=bin_time * np.arange(n_bins),
        counts=rng.poisson(rate * photons),
        calibration=1.0 / rate,
        bin_time=bin_time,
        metadata={"beta_sq": beta_sq, "n_th": n_th},
    )


def midpoint_slope(trace: IntensityTrace, report: Optional[TransitionReport] = None) -> float:
    """
    Normalized slope d(n / n_ref)/dt at the 50 % crossing (1/us)

    Central difference over one sample spacing on either side of t50.

    Raises:
        NoTransitionError: The trace never crosses n_ref / 2
    """
    report = report or transition_report(trace)
    if report.t50 is None:
        raise NoTransitionError(f"trace '{trace.name}' has no midpoint")
    dt = trace.dt
    upper, lower = np.interp([report.t50 + dt, report.t50 - dt], trace.t, trace.n)
    return float((upper - lower) / (2.0 * dt) / trace.n_ref)


def simulate_reference(
    params: PhysicalParams,
    t_end: float,
    samples: int = SWEEP_SAMPLES,
    controls: Optional[IntegratorControls] = None,
    name: str = "reference",
) -> IntensityTrace:
    """Mean-field trace from the blockaded start on a grid of ``samples`` intervals."""
    grid = output_grid(t_end, t_end / samples)
    trajectory = integrate_slow(params, initial_state(params), t_end, controls, t_eval=grid)
    return IntensityTrace.from_trajectory(trajectory, params.empty_cavity_photons, name)


def _simulated_slope(params: PhysicalParams, reference: IntensityTrace, controls: IntegratorControls) -> float:
    t_end = float(reference.t[-1])
    trajectory = integrate_slow(params, initial_state(params), t_end, controls, t_eval=reference.t)
    trace = IntensityTrace.from_trajectory(trajectory, params.empty_cavity_photons, "fit")
    try:
        return midpoint_slope(trace)
    except NoTransitionError:
        return 0.0


def fit_gamma(
    reference: IntensityTrace,
    params: PhysicalParams,
    search: Optional[Tuple[float, float]] = None,
    controls: Optional[IntegratorControls] = None,
    profile_points: int = 9,
    tol: float = 1e-3,
) -> GammaFit:
    """
    Escape rate that reproduces the reference midpoint slope

    The drive is taken from the reference (eta/kappa = sqrt(n_ref)). A coarse
    log-spaced residual profile over ``search`` locates the minimum, then a
    golden-section search refines it.

    Args:
        reference (IntensityTrace): Measured or simulated trace starting at t = 0
        params (PhysicalParams): Parameters apart from Gamma and the drive
        search (tuple): Gamma interval in rad/us; defaults to [1e-5, 1e-1] gamma

    Raises:
        NoTransitionError: The reference has no midpoint
        BracketingError: The profile minimum sits on the interval boundary
    """
    if reference.t[0] < 0:
        raise ValueError("reference must start at t >= 0 (use an unaligned trace)")
    target = midpoint_slope(reference)
    lo, hi = search or (1e-5 * params.gamma, 1e-1 * params.gamma)
    if not 0 < lo < hi:
        raise ValueError(f"invalid Gamma search interval ({lo}, {hi})")
    controls = controls or IntegratorControls()
    base = params.with_drive(math.sqrt(reference.n_ref))
    evaluations = {"count": 0}

    def residual(Gamma: float) -> float:
        evaluations["count"] += 1
        slope = _simulated_slope(base.model_copy(update={"Gamma": Gamma}), reference, controls)
        return (slope - target) ** 2

    grid = np.geomspace(lo, hi, profile_points)
    values = np.array([residual(Gamma) for Gamma in grid])
    profile = [(float(g), float(v)) for g, v in zip(grid, values)]
    best = int(np.argmin(values))
    logger.info("fit_gamma.profile", best_Gamma=float(grid[best]), residual=float(values[best]))
    if best in (0, profile_points - 1):
        raise BracketingError("search interval does not bracket a residual minimum", profile)

    result = minimize_scalar(
        residual, bracket=(grid[best - 1], grid[best], grid[best + 1]), method="golden", tol=tol
    )
    Gamma = float(result.x)
    fitted = _simulated_slope(base.model_copy(update={"Gamma": Gamma}), reference, controls)
    logger.info("fit_gamma.done", Gamma=Gamma, residual=float(result.fun), evaluations=evaluations["count"])
    return GammaFit(
        Gamma=Gamma,
        Gamma_over_gamma=Gamma / params.gamma,
        residual=float(result.fun),
        reference_slope=target,
        fitted_slope=fitted,
        evaluations=evaluations["count"],
        profile=profile,
    )


def slope_agreement(
    params: PhysicalParams,
    references: Sequence[IntensityTrace],
    controls: Optional[IntegratorControls] = None,
) -> List[float]:
    """Relative midpoint-slope mismatch of ``params`` against each reference."""
    controls = controls or IntegratorControls()
    mismatches = []
    for reference in references:
        target = midpoint_slope(reference)
        simulated = _simulated_slope(params.with_drive(math.sqrt(reference.n_ref)), reference, controls)
        mismatches.append(abs(simulated - target) / abs(target))
    return mismatches


def power_law_fit(points: Sequence[ScalingPoint]) -> PowerLawFit:
    """
    Fit n_th_integrated = amplitude * width ** exponent over the usable points

    Raises:
        FitError: Fewer than three usable points, or all widths equal
    """
    usable = [point for point in points if not point.excluded]
    fit = power_law_fit_arrays(
        [point.width for point in usable], [point.n_th_integrated for point in usable]
    )
    fit.excluded_points = len(points) - len(usable)
    return fit


def power_law_fit_arrays(x: Sequence[float], y: Sequence[float]) -> PowerLawFit:
    """Least-squares line through (log x, log y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise FitError(f"power-law fit needs at least 3 points, got {x.size}")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)) or np.any(x <= 0) or np.any(y <= 0):
        raise FitError("power-law fit needs finite, strictly positive points")
    log_x, log_y = np.log(x), np.log(y)
    if np.ptp(log_x) == 0:
        raise FitError("power-law fit needs at least two distinct abscissas")
    result = stats.linregress(log_x, log_y)
    residuals = log_y - (result.intercept + result.slope * log_x)
    return PowerLawFit(
        exponent=float(result.slope),
        exponent_stderr=float(result.stderr),
        amplitude=float(math.exp(result.intercept)),
        intercept_stderr=float(result.intercept_stderr),
        r_value=float(result.rvalue),
        n_points=int(x.size),
        log_residuals=residuals.tolist(),
    )


def _integrated_thermal(series: FluctuationSeries, t10: float, t90: float, t50: float) -> Tuple[float, float]:
    finite = np.isfinite(series.n_th)
    if not np.any(finite):
        return math.nan, math.nan
    t, n_th = series.t[finite], series.n_th[finite]
    if t90 <= t10:
        value = float(np.interp(t50, t, n_th))
        return value, 0.0
    inside = (t > t10) & (t < t90)
    tt = np.concatenate([[t10], t[inside], [t90]])
    values = np.interp(tt, t, n_th)
    integral = float(trapezoid(values, tt))
    return integral / (t90 - t10), integral


def _sweep_point(
    index: int,
    params: PhysicalParams,
    eta_over_kappa: float,
    cfg: StochasticConfig,
    mode: str,
    t_end: Optional[float],
    window: float,
    smoothing: Optional[float],
    controls: IntegratorControls,
    samples: int,
) -> ScalingPoint:
    drive = params.with_drive(eta_over_kappa)
    n_ref = drive.empty_cavity_photons
    span = t_end or 3.0 * transition_time_estimate(drive)
    grid = output_grid(span, span / samples)
    seed = None
    if mode == "stochastic":
        seed = derive_seed(cfg.rng_seed, index)
        trajectory, record = simulate_trajectory(
            drive, cfg.model_copy(update={"rng_seed": seed}), span, t_eval=grid
        )
        trace = IntensityTrace.from_trajectory(trajectory, n_ref, f"drive_{index}")
        series = fluctuations(record, window, kappa=drive.kappa)
    else:
        trajectory = integrate_slow(drive, initial_state(drive), span, controls, t_eval=grid)
        trace = IntensityTrace.from_trajectory(trajectory, n_ref, f"drive_{index}")
        series = intensity_fluctuations(trace, max(window, MIN_WINDOW_BINS * trace.dt))

    report = transition_report(trace, smoothing)
    if not report.has_transition:
        logger.warning("sweep_point_excluded", drive=n_ref, missing=report.missing, t_end=span)
        return ScalingPoint(
            drive=n_ref, width=math.nan, n_th_integrated=math.nan,
            eta_over_kappa=eta_over_kappa, seed=seed, excluded=True,
        )
    average, integral = _integrated_thermal(series, report.t10, report.t90, report.t50)
    return ScalingPoint(
        drive=n_ref,
        width=report.width,
        n_th_integrated=average,
        n_th_time_integral=integral,
        eta_over_kappa=eta_over_kappa,
        t10=report.t10,
        t50=report.t50,
        t90=report.t90,
        seed=seed,
        excluded=not np.isfinite(average),
    )


def scaling_sweep(
    params: PhysicalParams,
    drives: Sequence[float],
    cfg: StochasticConfig,
    mode: Literal["stochastic", "meanfield"] = "stochastic",
    t_end: Optional[float] = None,
    window: float = DEFAULT_WINDOW_US,
    smoothing: Optional[float] = None,
    controls: Optional[IntegratorControls] = None,
    samples: int = SWEEP_SAMPLES,
    threads: int = 1,
    progress: bool = False,
    repeats: int = 1,
) -> List[ScalingPoint]:
    """
    Width and integrated thermal photon number for each drive eta/kappa

    In stochastic mode every drive is run ``repeats`` times and each run is
    its own point; run r of drive i uses seed
    ``derive_seed(cfg.rng_seed, i * repeats + r)``, so equal drives get
    independent but reproducible noise. ``t_end`` defaults per drive to three
    times the estimated switching time, sampled on ``samples`` intervals.
    Drives with no transition come back flagged as excluded.
    """
    drives = [float(d) for d in drives]
    if not drives or any(d <= 0 for d in drives):
        raise ValueError("drives must be positive")
    if any(b < a for a, b in zip(drives, drives[1:])):
        raise ValueError("drives must be in ascending order")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    repeats = repeats if mode == "stochastic" else 1
    controls = controls or IntegratorControls()
    logger.info("scaling_sweep.start", drives=len(drives), mode=mode, repeats=repeats, threads=threads)

    runner = Parallel(n_jobs=threads, prefer="threads", return_as="generator")
    jobs = runner(
        delayed(_sweep_point)(i * repeats + r, params, d, cfg, mode, t_end, window, smoothing, controls, samples)
        for i, d in enumerate(drives)
        for r in range(repeats)
    )
    points = list(tqdm(jobs, total=len(drives) * repeats, desc="drives", disable=not progress))
    logger.info("scaling_sweep.done", excluded=sum(p.excluded for p in points))
    return points
