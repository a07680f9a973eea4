#!/usr/bin/env python3
"""
Tests for the mean-field integrators and the slow manifold
"""

import math

import numpy as np
import pandas as pd
import pytest

from analysis import IntensityTrace, transition_report
from core_model import PhysicalParams, dispersive_shift, effective_shift_atoms, lorentzian_transmission
from errors import SingularSystemError, StepBudgetExceeded
from meanfield import (
    IntegratorControls,
    MeanFieldState,
    Trajectory,
    adiabatic_inversion,
    derivative,
    initial_state,
    integrate_full,
    integrate_slow,
    manifold_state,
    output_grid,
    steady_state,
    transition_time_estimate,
)


def test_output_grid():
    np.testing.assert_allclose(output_grid(10.0, 3.0), [0.0, 3.0, 6.0, 9.0, 10.0])
    np.testing.assert_allclose(output_grid(9.0, 3.0), [0.0, 3.0, 6.0, 9.0])
    np.testing.assert_allclose(output_grid(1.0, 5.0), [0.0, 1.0])


def test_state_vector_round_trip():
    state = MeanFieldState(1 + 2j, -3 + 0.5j, 10.0, 2.0)
    assert MeanFieldState.from_vector(state.to_vector()) == state
    assert state.photons == pytest.approx(5.0)
    assert state.population == pytest.approx(12.0)
    assert state.is_physical()
    assert not MeanFieldState(0j, 0j, -1.0, 0.0).is_physical()


def test_derivative_from_vacuum(lab_params):
    rates = derivative(lab_params, initial_state(lab_params))
    assert rates.a == pytest.approx(complex(lab_params.eta, 0.0))
    assert rates.M == 0
    assert rates.N_g == 0 and rates.N_e == 0


def test_steady_state_is_a_fixed_point_of_the_field(lab_params):
    a, M = steady_state(lab_params, 1.5e4, 200.0)
    rates = derivative(lab_params, MeanFieldState(a, M, 1.5e4, 200.0))
    assert abs(rates.a) <= 1e-9 * lab_params.eta
    assert abs(rates.M) <= 1e-9 * lab_params.eta * lab_params.g_eff


def test_steady_state_without_drive_is_vacuum(lab_params):
    a, M = steady_state(lab_params.with_drive(0.0), 2e4, 0.0)
    assert a == 0 and M == 0


def test_steady_state_accepts_arrays(lab_params):
    a, M = steady_state(lab_params, np.array([2e4, 1e4, 0.0]), np.zeros(3))
    assert a.shape == (3,)
    assert abs(a[2]) ** 2 == pytest.approx(lab_params.empty_cavity_photons)


def test_steady_state_rejects_negative_populations(lab_params):
    with pytest.raises(ValueError):
        steady_state(lab_params, -1.0, 0.0)


def test_steady_state_singular_system():
    params = PhysicalParams.experiment_defaults(delta_A_mhz=0.0)
    inverted = params.kappa * params.gamma_total / params.g_eff ** 2
    with pytest.raises(SingularSystemError):
        steady_state(params, 0.0, inverted)


def test_steady_state_matches_lorentzian_in_dispersive_limit(dispersive_params):
    N_g = dispersive_params.n_atoms_total
    a, _ = steady_state(dispersive_params, N_g, 0.0)
    relative = abs(a) ** 2 / dispersive_params.empty_cavity_photons
    expected = lorentzian_transmission(
        dispersive_params, effective_shift_atoms(dispersive_params, N_g, 0.0), dispersive_shift(dispersive_params)
    )
    assert relative == pytest.approx(expected, rel=0.01)
    assert relative <= 1.1e-2


def test_steady_state_close_to_lorentzian_at_experimental_detuning(lab_params):
    a, _ = steady_state(lab_params, lab_params.n_atoms_total, 0.0)
    relative = abs(a) ** 2 / lab_params.empty_cavity_photons
    expected = lorentzian_transmission(lab_params, 1e4, dispersive_shift(lab_params))
    assert relative == pytest.approx(expected, rel=0.1)


def test_compensating_cavity_detuning_restores_transmission(dispersive_params):
    shift = 1e4 * dispersive_shift(dispersive_params)
    compensated = dispersive_params.model_copy(update={"delta_C": shift})
    a, _ = steady_state(compensated, compensated.n_atoms_total, 0.0)
    assert abs(a) ** 2 / compensated.empty_cavity_photons >= 0.95


def test_frozen_full_integration_relaxes_to_steady_state(lab_params):
    controls = IntegratorControls(freeze_populations=True, output_dt=1.0)
    trajectory = integrate_full(lab_params, initial_state(lab_params), 10.0, controls)
    a, _ = steady_state(lab_params, lab_params.n_atoms_total, 0.0)
    assert trajectory.intensity[-1] == pytest.approx(abs(a) ** 2, rel=1e-4)
    assert np.all(trajectory.N_g == lab_params.n_atoms_total)


def test_frozen_slow_integration_holds_the_blockade(dispersive_params):
    controls = IntegratorControls(freeze_populations=True, output_dt=100.0)
    trajectory = integrate_slow(dispersive_params, initial_state(dispersive_params), 1000.0, controls)
    relative = trajectory.intensity / dispersive_params.empty_cavity_photons
    expected = lorentzian_transmission(dispersive_params, 1e4, dispersive_shift(dispersive_params))
    np.testing.assert_allclose(relative, expected, rtol=0.01)


def test_full_and_slow_integrators_agree(lab_params, controls):
    t_end = 1e3 / lab_params.kappa
    grid = output_grid(t_end, 0.5)
    full = integrate_full(lab_params, initial_state(lab_params), t_end, controls, t_eval=grid)
    slow = integrate_slow(lab_params, initial_state(lab_params), t_end, controls, t_eval=grid)
    settled = grid >= 10.0
    np.testing.assert_allclose(full.intensity[settled], slow.intensity[settled], rtol=0.02)
    assert full.metadata["integrator"] == "full"
    assert slow.metadata["integrator"] == "slow"


def test_full_integration_conserves_population_without_escape(lab_params, controls):
    closed = lab_params.with_escape(0.0)
    trajectory = integrate_full(closed, initial_state(closed), 20.0, controls.model_copy(update={"output_dt": 1.0}))
    drift = np.abs(trajectory.population / closed.n_atoms_total - 1.0)
    assert drift.max() < 1e-6


def test_slow_integration_conserves_population_without_escape(lab_params, controls):
    closed = lab_params.with_escape(0.0)
    trajectory = integrate_slow(closed, initial_state(closed), 3.0e5, controls)
    drift = np.abs(trajectory.population / closed.n_atoms_total - 1.0)
    assert drift.max() < 1e-6
    assert np.all(trajectory.N_e >= 0)


def test_uncoupled_cavity_follows_the_linear_response(controls):
    params = PhysicalParams.experiment_defaults(g_mhz=0.0)
    grid = output_grid(2.0, 0.01)
    trajectory = integrate_full(params, initial_state(params), 2.0, controls, t_eval=grid)
    cavity = complex(params.kappa, -params.delta_C)
    exact = params.eta / cavity * (1.0 - np.exp(-cavity * grid))
    assert np.max(np.abs(trajectory.a - exact)) <= 1e-6 * params.eta_over_kappa
    np.testing.assert_allclose(trajectory.N_g, params.n_atoms_total)


def test_undriven_cavity_stays_dark(lab_params, controls):
    dark = lab_params.with_drive(0.0)
    full = integrate_full(dark, initial_state(dark), 20.0, controls.model_copy(update={"output_dt": 1.0}))
    slow = integrate_slow(dark, initial_state(dark), 3.0e5, controls)
    for trajectory in (full, slow):
        assert np.all(trajectory.intensity == 0.0)
        assert np.all(trajectory.N_e == 0.0)
        np.testing.assert_allclose(trajectory.N_g, dark.n_atoms_total, rtol=1e-12)


def test_slow_integration_uses_an_explicit_pair(lab_params, controls):
    trajectory = integrate_slow(lab_params, initial_state(lab_params), 2000.0, controls)
    assert trajectory.metadata["method"] == "DOP853"
    assert trajectory.metadata["nfev"] > 0
    with pytest.raises(ValueError):
        IntegratorControls(slow_method="LSODA")


def test_population_never_grows_with_escape(lab_params, controls):
    t_end = 3.0 * transition_time_estimate(lab_params)
    trajectory = integrate_slow(lab_params, initial_state(lab_params), t_end, controls)
    assert np.all(np.diff(trajectory.population) <= 1e-9 * lab_params.n_atoms_total)
    assert trajectory.population[-1] < 0.5 * lab_params.n_atoms_total


def test_step_budget_is_enforced(lab_params):
    controls = IntegratorControls(max_steps=10)
    with pytest.raises(StepBudgetExceeded) as excinfo:
        integrate_full(lab_params, initial_state(lab_params), 100.0, controls)
    assert excinfo.value.max_steps == 10
    assert "integrate_slow" in str(excinfo.value)


def test_slow_integration_flags_non_dispersive_detuning():
    params = PhysicalParams.experiment_defaults(delta_A_mhz=-5.0)
    trajectory = integrate_slow(params, initial_state(params), 10.0, IntegratorControls(output_dt=1.0))
    assert trajectory.metadata["warnings"]


def test_integrators_reject_bad_windows(lab_params):
    with pytest.raises(ValueError):
        integrate_slow(lab_params, initial_state(lab_params), 0.0)
    with pytest.raises(ValueError):
        integrate_slow(lab_params, initial_state(lab_params), 10.0, t_eval=np.array([0.0, 20.0]))


def test_adiabatic_inversion_without_drive_is_all_ground(lab_params):
    assert adiabatic_inversion(lab_params.with_drive(0.0), 2e4) == pytest.approx(2e4)
    assert adiabatic_inversion(lab_params, 0.0) == 0.0


@pytest.mark.parametrize("eta_over_kappa", [18.0, 100.0])
def test_manifold_state_is_stationary(lab_params, eta_over_kappa):
    params = lab_params.with_escape(0.0).with_drive(eta_over_kappa)
    inversion = adiabatic_inversion(params, 2e4)
    state = manifold_state(params, 2e4, inversion)
    assert state.population == pytest.approx(2e4)
    assert 0 < state.N_e < state.N_g
    rates = derivative(params, state)
    assert abs(rates.N_e) <= 1e-6 * 2.0 * params.gamma_total * state.N_e


def test_transition_time_estimate(lab_params):
    estimate = transition_time_estimate(lab_params)
    assert 5e4 < estimate < 2e5
    assert transition_time_estimate(lab_params.with_drive(36.0)) == pytest.approx(estimate / 4)
    assert transition_time_estimate(lab_params.with_escape(0.0)) == math.inf


def test_slow_trajectory_switches_near_the_estimate(lab_params, controls):
    params = lab_params.with_drive(math.sqrt(3000.0))
    estimate = transition_time_estimate(params)
    grid = output_grid(3 * estimate, 3 * estimate / 2000)
    trajectory = integrate_slow(params, initial_state(params), 3 * estimate, controls, t_eval=grid)
    report = transition_report(IntensityTrace.from_trajectory(trajectory, params.empty_cavity_photons))
    assert report.has_transition
    assert 0.5 * estimate < report.t50 < 1.5 * estimate
    assert trajectory.intensity[-1] >= 0.95 * params.empty_cavity_photons


def test_trajectory_frame_round_trip(lab_params):
    trajectory = integrate_slow(lab_params, initial_state(lab_params), 1000.0, IntegratorControls(output_dt=250.0))
    frame = trajectory.to_frame()
    assert isinstance(frame, pd.DataFrame)
    rebuilt = Trajectory.from_frame(frame)
    np.testing.assert_allclose(rebuilt.intensity, trajectory.intensity)
    assert len(rebuilt) == 5


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(t=[0.0, 1.0], a=[0j], M=[0j, 0j], N_g=[1.0, 1.0], N_e=[0.0, 0.0])
    with pytest.raises(ValueError):
        Trajectory(t=[1.0, 0.0], a=[0j, 0j], M=[0j, 0j], N_g=[1.0, 1.0], N_e=[0.0, 0.0])
