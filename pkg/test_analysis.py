#!/usr/bin/env python3
"""
Tests for the measurement pipeline: crossings, photon statistics and fits
"""

import math

import numpy as np
import pytest

from analysis import (
    IntensityTrace,
    ScalingPoint,
    align_midpoints,
    displaced_thermal_g2,
    fit_gamma,
    fluctuations,
    intensity_fluctuations,
    midpoint_slope,
    moving_average,
    power_law_fit,
    power_law_fit_arrays,
    scaling_sweep,
    simulate_reference,
    slope_agreement,
    synthetic_displaced_thermal_counts,
    thermal_photon_number,
    transition_report,
)
from errors import BracketingError, FitError, NoMidpointError, NoTransitionError
from meanfield import transition_time_estimate
from stochastic import CountRecord, StochasticConfig, derive_seed


def logistic_trace(t0=500.0, width=20.0, n_ref=100.0, dt=0.1, span=1000.0, name="logistic"):
    t = np.arange(0.0, span + dt / 2, dt)
    return IntensityTrace(t, n_ref / (1.0 + np.exp(-(t - t0) / width)), n_ref, name)


def test_trace_validation():
    with pytest.raises(ValueError):
        IntensityTrace(np.array([0.0, 1.0, 3.0]), np.ones(3), 1.0)
    with pytest.raises(ValueError):
        IntensityTrace(np.arange(3.0), np.array([1.0, -1.0, 1.0]), 1.0)
    with pytest.raises(ValueError):
        IntensityTrace(np.arange(3.0), np.ones(3), 0.0)
    with pytest.raises(ValueError):
        IntensityTrace(np.arange(1.0), np.ones(1), 1.0)


def test_logistic_crossing_times():
    report = transition_report(logistic_trace())
    spread = 20.0 * math.log(9.0)
    assert report.has_transition
    assert report.t50 == pytest.approx(500.0, abs=0.02)
    assert report.t10 == pytest.approx(500.0 - spread, abs=0.02)
    assert report.t90 == pytest.approx(500.0 + spread, abs=0.02)
    assert report.width == pytest.approx(2 * spread, abs=0.04)


def test_constant_trace_has_no_transition():
    trace = IntensityTrace(np.arange(100.0), np.full(100, 5.0), 100.0, "flat")
    report = transition_report(trace)
    assert not report.has_transition
    assert report.missing == ("t10", "t50", "t90")
    assert report.width is None
    assert report.as_dict()["transition"] is False


def test_ideal_step_width_is_sub_sample():
    n = np.where(np.arange(10) >= 5, 100.0, 0.0)
    report = transition_report(IntensityTrace(np.arange(10.0), n, 100.0))
    assert report.t10 == pytest.approx(4.1)
    assert report.t50 == pytest.approx(4.5)
    assert report.width == pytest.approx(0.8)


def test_sample_on_the_level_counts_as_crossing():
    report = transition_report(IntensityTrace(np.arange(3.0), np.array([0.0, 50.0, 100.0]), 100.0))
    assert report.t50 == pytest.approx(1.0)


def test_first_crossing_wins():
    n = np.array([0.0, 60.0, 20.0, 80.0, 100.0])
    report = transition_report(IntensityTrace(np.arange(5.0), n, 100.0))
    assert report.t50 == pytest.approx(50.0 / 60.0)


def test_smoothing_suppresses_a_single_spike():
    n = np.zeros(200)
    n[50] = 100.0
    n[150:] = 100.0
    trace = IntensityTrace(np.arange(200.0), n, 100.0)
    assert transition_report(trace).t50 < 51
    smoothed = transition_report(trace, smoothing=11.0)
    assert smoothed.t50 > 140
    assert smoothed.smoothing_us == 11.0


def test_moving_average_keeps_length():
    values = np.arange(10.0)
    averaged = moving_average(values, 3)
    assert averaged.shape == values.shape
    assert averaged[5] == pytest.approx(5.0)
    np.testing.assert_array_equal(moving_average(values, 1), values)


def test_align_midpoints_puts_t50_at_zero():
    traces = [logistic_trace(t0=300.0, name="early"), logistic_trace(t0=650.0, width=10.0, name="late")]
    aligned = align_midpoints(traces)
    assert [trace.name for trace in aligned] == ["early", "late"]
    assert np.any(np.isclose(aligned[0].t, 0.0, atol=1e-9))
    np.testing.assert_allclose(aligned[0].t, aligned[1].t)
    for trace in aligned:
        assert transition_report(trace).t50 == pytest.approx(0.0, abs=0.05)


def test_align_midpoints_needs_a_midpoint():
    flat = IntensityTrace(np.arange(10.0), np.zeros(10), 1.0, "flat")
    with pytest.raises(NoMidpointError):
        align_midpoints([logistic_trace(), flat])
    assert align_midpoints([]) == []


def test_thermal_photon_number_convention():
    assert thermal_photon_number(10.0, 2.0) == pytest.approx(10.0)
    assert thermal_photon_number(10.0, 1.0) == pytest.approx(0.0)
    assert thermal_photon_number(10.0, 2.5) == pytest.approx(10.0)
    assert thermal_photon_number(10.0, 0.5) == pytest.approx(0.0)
    assert thermal_photon_number(25.0, 1.36) == pytest.approx(5.0)


def test_displaced_thermal_g2():
    assert displaced_thermal_g2(20.0, 5.0) == pytest.approx(1.36)
    assert displaced_thermal_g2(0.0, 10.0) == pytest.approx(2.0)
    assert displaced_thermal_g2(10.0, 0.0) == pytest.approx(1.0)
    assert displaced_thermal_g2(0.0, 0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("beta_sq,n_th,n_bins", [(20.0, 5.0, 100_000), (100.0, 1.0, 100_000), (0.0, 10.0, 1_000_000)])
def test_thermal_photons_recovered_from_counts(beta_sq, n_th, n_bins, rng):
    record = synthetic_displaced_thermal_counts(beta_sq, n_th, n_bins, rng)
    series = fluctuations(record, window=float(n_bins))
    assert len(series) == 1
    assert series.n_th[0] == pytest.approx(n_th, rel=0.10)
    assert series.mean_n[0] == pytest.approx(beta_sq + n_th, rel=0.02)


def test_poisson_counts_have_unit_g2(rng, lab_params):
    record = synthetic_displaced_thermal_counts(500.0 / (2 * lab_params.kappa), 0.0, 100_000, rng)
    series = fluctuations(record, window=100_000.0)
    mu = record.counts.mean()
    sigma = math.sqrt((mu + 2 * mu ** 2) / len(record)) / mu ** 2
    assert abs(series.g2_raw[0] - 1.0) <= 5 * sigma


def test_fluctuation_windows_and_stride(rng):
    record = synthetic_displaced_thermal_counts(10.0, 1.0, 2000, rng)
    series = fluctuations(record, window=100.0, stride=10)
    assert len(series) == (2000 - 100) // 10 + 1
    assert series.t[0] == pytest.approx(50.0)
    assert series.window == 100.0
    assert list(series.to_frame().columns) == ["t_us", "mean_n", "g2_raw", "g2_clamped", "n_th"]


def test_fluctuation_window_limits(rng):
    record = synthetic_displaced_thermal_counts(10.0, 1.0, 100, rng)
    with pytest.raises(ValueError):
        fluctuations(record, window=5.0)
    with pytest.raises(ValueError):
        fluctuations(record, window=500.0)


def test_empty_windows_give_nan():
    record = CountRecord(t=np.arange(50.0), counts=np.zeros(50, dtype=int), calibration=1.0, bin_time=1.0)
    series = fluctuations(record, window=10.0)
    assert np.all(np.isnan(series.g2_raw))
    assert math.isnan(series.peak()[1])


def test_noiseless_constant_intensity_has_no_thermal_part():
    trace = IntensityTrace(np.arange(1000.0), np.full(1000, 40.0), 100.0)
    series = intensity_fluctuations(trace, window=100.0)
    np.testing.assert_allclose(series.g2_raw, 1.0, atol=1e-9)
    np.testing.assert_allclose(series.n_th, 0.0, atol=1e-6)


def test_noiseless_ramp_peaks_in_the_transition():
    trace = logistic_trace(dt=1.0, width=20.0)
    series = intensity_fluctuations(trace, window=50.0)
    peak_time, peak = series.peak()
    report = transition_report(trace)
    assert report.t10 <= peak_time <= report.t90
    assert peak > 0


def test_midpoint_slope_of_a_ramp():
    t = np.arange(0.0, 101.0)
    trace = IntensityTrace(t, 2.0 * t, 200.0)
    assert midpoint_slope(trace) == pytest.approx(0.01)
    with pytest.raises(NoTransitionError):
        midpoint_slope(IntensityTrace(t, np.zeros_like(t), 200.0))


def test_power_law_fit_exact():
    x = np.geomspace(1.0, 100.0, 20)
    fit = power_law_fit_arrays(x, 3.0 * x ** -1.9)
    assert abs(fit.exponent + 1.9) < 1e-5
    assert fit.amplitude == pytest.approx(3.0)
    assert fit.n_points == 20
    assert fit.report()["log_residual_rms"] == pytest.approx(0.0, abs=1e-9)


def test_power_law_fit_with_multiplicative_noise(rng):
    x = np.geomspace(1.0, 100.0, 20)
    deviations = [
        abs(power_law_fit_arrays(x, x ** -1.9 * (1.0 + 0.05 * rng.standard_normal(x.size))).exponent + 1.9)
        for _ in range(100)
    ]
    assert max(deviations) <= 0.05


def test_power_law_fit_rejects_bad_input():
    with pytest.raises(FitError):
        power_law_fit_arrays([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(FitError):
        power_law_fit_arrays([1.0, 2.0, 3.0], [1.0, 0.0, 3.0])
    with pytest.raises(FitError):
        power_law_fit_arrays([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


def test_power_law_fit_skips_excluded_points():
    points = [ScalingPoint(drive=d, width=w, n_th_integrated=w ** -2.0) for d, w in ((1, 10.0), (2, 5.0), (3, 2.0))]
    points.append(ScalingPoint(drive=4, width=math.nan, n_th_integrated=math.nan, excluded=True))
    fit = power_law_fit(points)
    assert fit.exponent == pytest.approx(-2.0)
    assert fit.excluded_points == 1
    assert not points[-1].usable
    with pytest.raises(FitError):
        power_law_fit(points[2:])


def test_meanfield_sweep_widths_shrink_with_drive(lab_params):
    points = scaling_sweep(lab_params, [40.0, 55.0, 75.0], StochasticConfig(), mode="meanfield")
    assert all(point.usable for point in points)
    widths = [point.width for point in points]
    assert widths[0] > widths[1] > widths[2]
    assert [point.drive for point in points] == pytest.approx([1600.0, 3025.0, 5625.0])
    assert all(point.seed is None for point in points)
    assert all(point.n_th_time_integral > 0 for point in points)
    fit = power_law_fit(points)
    assert fit.exponent < 0


def test_sweep_marks_drives_without_transition(lab_params):
    points = scaling_sweep(lab_params, [18.0], StochasticConfig(), mode="meanfield", t_end=2000.0)
    assert points[0].excluded
    assert math.isnan(points[0].width)
    assert points[0].as_row()["excluded"] == 1


def test_sweep_rejects_unsorted_drives(lab_params):
    with pytest.raises(ValueError):
        scaling_sweep(lab_params, [20.0, 10.0], StochasticConfig())


def test_stochastic_sweep_point(lab_params):
    cfg = StochasticConfig(n_atoms=2000, rng_seed=9)
    points = scaling_sweep(lab_params, [math.sqrt(3000.0)], cfg, mode="stochastic")
    point = points[0]
    assert point.seed == derive_seed(9, 0)
    assert point.usable
    assert point.t10 < point.t50 < point.t90


def test_stochastic_sweep_repeats_each_drive(lab_params):
    cfg = StochasticConfig(n_atoms=500, rng_seed=9)
    points = scaling_sweep(lab_params, [math.sqrt(3000.0)], cfg, mode="stochastic", samples=400, repeats=2)
    assert [point.seed for point in points] == [derive_seed(9, 0), derive_seed(9, 1)]
    assert points[0].t50 != points[1].t50
    single = scaling_sweep(lab_params, [40.0], cfg, mode="meanfield", samples=400, repeats=3)
    assert len(single) == 1
    with pytest.raises(ValueError):
        scaling_sweep(lab_params, [40.0], cfg, repeats=0)


def test_fit_gamma_rejects_flat_reference(lab_params):
    flat = IntensityTrace(np.arange(0.0, 1000.0, 10.0), np.full(100, 3.0), 324.0)
    with pytest.raises(NoTransitionError):
        fit_gamma(flat, lab_params)


@pytest.mark.slow
def test_fit_gamma_reports_unbracketed_search(lab_params):
    drive = lab_params.with_drive(math.sqrt(1000.0))
    reference = simulate_reference(drive, 3 * transition_time_estimate(drive), samples=400)
    with pytest.raises(BracketingError) as excinfo:
        fit_gamma(reference, lab_params, search=(1e-5 * lab_params.gamma, 1e-4 * lab_params.gamma))
    assert len(excinfo.value.profile) == 9


@pytest.mark.slow
def test_fit_gamma_round_trip(lab_params, controls):
    references = []
    for eta_over_kappa in (10.0, math.sqrt(1000.0), 100.0):
        drive = lab_params.with_drive(eta_over_kappa)
        references.append(simulate_reference(drive, 3 * transition_time_estimate(drive), controls=controls))
    result = fit_gamma(references[1], lab_params, controls=controls)
    assert result.Gamma == pytest.approx(lab_params.Gamma, rel=0.02)
    assert result.Gamma_over_gamma == pytest.approx(0.93e-3, rel=0.02)
    fitted = lab_params.model_copy(update={"Gamma": result.Gamma})
    assert max(slope_agreement(fitted, [references[0], references[2]], controls)) <= 0.10
