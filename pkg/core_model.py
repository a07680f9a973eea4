"""
Core Model: Units, Parameters and the Static Cavity Formulas
============================================================

Unit system: every rate, detuning and coupling is an angular frequency in
rad/us and every time is in us. Laboratory values quoted as "2*pi x f MHz"
go through ``mhz_to_rad_per_us``, which applies the 2*pi.

This module holds:
- ``PhysicalParams``: kappa, gamma, Gamma, g, detunings, drive and atom number
- ``ModeGeometry`` and the standing-wave TEM00 mode function
- ``AtomEnsemble`` and the effective atom number N = sum |f(r_j)|^2 p_j
- the dispersive shift delta = g^2 / Delta_A and the Lorentzian transmission
"""

import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from errors import DispersiveModelError

logger = structlog.get_logger(__name__)

ArrayLike = Union[float, np.ndarray]

# Rb D2 natural linewidth (HWHM), an input rather than a derived value
RB87_D2_GAMMA_MHZ = 3.03
RB87_D2_WAVELENGTH_NM = 780.241

DISPERSIVE_GUARD_RATIO = 5.0


def mhz_to_rad_per_us(frequency_mhz: ArrayLike) -> ArrayLike:
    """Convert an ordinary frequency in MHz to an angular frequency in rad/us."""
    return 2.0 * math.pi * frequency_mhz


def rad_per_us_to_mhz(omega: ArrayLike) -> ArrayLike:
    """Convert an angular frequency in rad/us back to MHz."""
    return omega / (2.0 * math.pi)


class PhysicalParams(BaseModel):
    """
    Rates, detunings and couplings of the driven atom-cavity system

    All angular-frequency fields are in rad/us. ``n_atoms_total`` is the
    mean-field atom number (already weighted by the mode function), so the
    effective N of the transmission formula starts at n_atoms_total / 2 with
    the averaged coupling convention.
    """

    model_config = ConfigDict(frozen=True)

    kappa: float = Field(gt=0, description="cavity field decay rate (HWHM)")
    gamma: float = Field(gt=0, description="atomic dipole decay rate (HWHM)")
    Gamma: float = Field(ge=0, description="escape rate to dark states")
    g: float = Field(ge=0, description="single-photon Rabi coupling at the mode maximum")
    delta_A: float = Field(description="atom detuning omega - omega_A")
    delta_C: float = Field(default=0.0, description="cavity detuning omega - omega_C")
    eta: float = Field(ge=0, description="coherent drive amplitude")
    n_atoms_total: float = Field(ge=0, description="atom number in the mode volume")
    coupling: Literal["averaged", "peak"] = "averaged"

    @classmethod
    def from_lab_units(
        cls,
        kappa_mhz: float = 3.22,
        gamma_mhz: float = RB87_D2_GAMMA_MHZ,
        Gamma_over_gamma: float = 0.93e-3,
        g_mhz: float = 0.33,
        delta_A_mhz: float = -35.0,
        delta_C_mhz: float = 0.0,
        eta_over_kappa: float = 18.0,
        n_atoms: float = 2.0e4,
        coupling: str = "averaged",
    ) -> "PhysicalParams":
        """
        Build parameters from laboratory units

        Frequencies are ordinary MHz (2*pi is applied here), the escape rate
        is given relative to gamma and the drive relative to kappa.
        """
        kappa = mhz_to_rad_per_us(kappa_mhz)
        gamma = mhz_to_rad_per_us(gamma_mhz)
        return cls(
            kappa=kappa,
            gamma=gamma,
            Gamma=Gamma_over_gamma * gamma,
            g=mhz_to_rad_per_us(g_mhz),
            delta_A=mhz_to_rad_per_us(delta_A_mhz),
            delta_C=mhz_to_rad_per_us(delta_C_mhz),
            eta=eta_over_kappa * kappa,
            n_atoms_total=n_atoms,
            coupling=coupling,
        )

    @classmethod
    def experiment_defaults(cls, **overrides) -> "PhysicalParams":
        """The experimental parameter set, with optional lab-unit overrides."""
        return cls.from_lab_units(**overrides)

    @property
    def g_eff(self) -> float:
        """Coupling used in the mean-field equations (g/sqrt(2) when averaged over the mode)."""
        if self.coupling == "averaged":
            return self.g / math.sqrt(2.0)
        return self.g

    @property
    def gamma_total(self) -> float:
        """Polarization decay gamma + Gamma."""
        return self.gamma + self.Gamma

    @property
    def eta_over_kappa(self) -> float:
        return self.eta / self.kappa

    @property
    def empty_cavity_photons(self) -> float:
        """Resonant empty-cavity photon number (eta/kappa)^2."""
        return self.eta_over_kappa ** 2

    def with_drive(self, eta_over_kappa: float) -> "PhysicalParams":
        return self.model_copy(update={"eta": eta_over_kappa * self.kappa})

    def with_escape(self, Gamma_over_gamma: float) -> "PhysicalParams":
        return self.model_copy(update={"Gamma": Gamma_over_gamma * self.gamma})

    def to_lab_units(self) -> dict:
        """Inverse of ``from_lab_units`` (parameter-file keys and values)."""
        return {
            "kappa_mhz": rad_per_us_to_mhz(self.kappa),
            "gamma_mhz": rad_per_us_to_mhz(self.gamma),
            "Gamma_over_gamma": self.Gamma / self.gamma,
            "g_mhz": rad_per_us_to_mhz(self.g),
            "delta_A_mhz": rad_per_us_to_mhz(self.delta_A),
            "delta_C_mhz": rad_per_us_to_mhz(self.delta_C),
            "eta_over_kappa": self.eta_over_kappa,
            "n_atoms": self.n_atoms_total,
            "coupling": self.coupling,
        }


class ModeGeometry(BaseModel):
    """Gaussian standing-wave mode: waist in um and wavenumber k = 2*pi/lambda in 1/um."""

    model_config = ConfigDict(frozen=True)

    waist: float = Field(default=127.0, gt=0)
    wavenumber: float = Field(default=2.0 * math.pi / (RB87_D2_WAVELENGTH_NM * 1e-3), gt=0)

    @classmethod
    def from_wavelength(cls, waist_um: float, wavelength_nm: float) -> "ModeGeometry":
        return cls(waist=waist_um, wavenumber=2.0 * math.pi / (wavelength_nm * 1e-3))

    @property
    def wavelength(self) -> float:
        """Wavelength in um."""
        return 2.0 * math.pi / self.wavenumber


@dataclass(frozen=True)
class AtomEnsemble:
    """
    Static atom positions r_j (um) and state weights p_j

    p_j is the ground minus excited occupation of atom j; |p_j| < 1 once
    population has leaked to dark states.
    """

    positions: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if positions.shape[-1] != 3:
            raise ValueError(f"positions must be 3-vectors, got shape {positions.shape}")
        if positions.shape[0] != p.shape[0]:
            raise ValueError(
                f"positions and p differ in length ({positions.shape[0]} != {p.shape[0]})"
            )
        if np.any(np.abs(p) > 1.0):
            raise ValueError("every p_j must lie in [-1, 1]")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "p", p)

    def __len__(self) -> int:
        return self.p.shape[0]

    def with_weights(self, p: np.ndarray) -> "AtomEnsemble":
        return AtomEnsemble(self.positions, p)


def mode_intensity(geometry: ModeGeometry, r: np.ndarray) -> ArrayLike:
    """
    Standing-wave TEM00 mode intensity |f(r)|^2

    |f|^2 = cos^2(k z) * exp(-2 (x^2 + y^2) / w^2), equal to 1 on the axis at
    an antinode. ``r`` may be one 3-vector or an array of shape (..., 3).
    """
    r = np.asarray(r, dtype=float)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    transverse = np.exp(-2.0 * (x ** 2 + y ** 2) / geometry.waist ** 2)
    weight = np.cos(geometry.wavenumber * z) ** 2 * transverse
    if weight.ndim == 0:
        return float(weight)
    return weight


def effective_atom_number(ensemble: AtomEnsemble, geometry: ModeGeometry) -> float:
    """Effective atom number N = sum_j |f(r_j)|^2 p_j (j = 1..count)."""
    weights = mode_intensity(geometry, ensemble.positions)
    return float(np.dot(np.atleast_1d(weights), ensemble.p))


def sample_ensemble(
    geometry: ModeGeometry,
    n_atoms: int,
    rng: np.random.Generator,
    n_wavelengths: int = 100,
    cloud_ratio: float = 10.0,
    on_axis: bool = False,
    p: float = 1.0,
) -> AtomEnsemble:
    """
    Draw static atom positions for Eq.-(2) style averages

    Args:
        geometry (ModeGeometry): Mode the atoms sit in
        n_atoms (int): Number of atoms to draw
        rng (np.random.Generator): Random source
        n_wavelengths (int): Axial extent, an integer number of wavelengths
        cloud_ratio (float): Transverse cloud rms size in units of the waist
        on_axis (bool): Put every atom on the cavity axis (x = y = 0)
        p (float): State weight given to every atom

    Returns:
        AtomEnsemble: Positions and uniform weights
    """
    if n_wavelengths < 1:
        raise ValueError("n_wavelengths must be a positive integer")
    length = n_wavelengths * geometry.wavelength
    z = rng.uniform(-0.5 * length, 0.5 * length, size=n_atoms)
    if on_axis:
        x = np.zeros(n_atoms)
        y = np.zeros(n_atoms)
    else:
        sigma = cloud_ratio * geometry.waist
        x = rng.normal(0.0, sigma, size=n_atoms)
        y = rng.normal(0.0, sigma, size=n_atoms)
    return AtomEnsemble(np.column_stack([x, y, z]), np.full(n_atoms, p))


def dispersive_shift(params: PhysicalParams) -> float:
    """
    Single-atom cavity shift delta = g^2 / Delta_A (rad/us)

    Carries the sign of Delta_A, so it is negative for red detuning.

    Raises:
        DispersiveModelError: On atomic resonance (Delta_A = 0)
    """
    if params.delta_A == 0.0:
        raise DispersiveModelError("atomic resonance: dispersive model invalid")
    return params.g ** 2 / params.delta_A


def lorentzian_transmission(params: PhysicalParams, N: ArrayLike, delta: float) -> ArrayLike:
    """
    Transmitted intensity relative to the resonant empty cavity

    I_out / I_0 = 1 / (((Delta_C - N delta) / kappa)^2 + 1)
    """
    detuning = (params.delta_C - np.asarray(N, dtype=float) * delta) / params.kappa
    transmission = 1.0 / (detuning ** 2 + 1.0)
    if np.ndim(transmission) == 0:
        return float(transmission)
    return transmission


def effective_shift_atoms(params: PhysicalParams, N_g: ArrayLike, N_e: ArrayLike) -> ArrayLike:
    """
    The N of the transmission formula implied by mean-field populations

    (N_g - N_e) / 2 with the mode-averaged coupling, N_g - N_e with the peak
    coupling, so that g_eff^2 (N_g - N_e) = g^2 N in both conventions.
    """
    scale = (params.g_eff / params.g) ** 2 if params.g > 0 else 0.5
    return scale * (np.asarray(N_g) - np.asarray(N_e))


def is_dispersive(params: PhysicalParams, threshold: Optional[float] = None) -> bool:
    """Check the far-detuned guard |Delta_A| >= threshold * gamma; warn when it fails."""
    threshold = DISPERSIVE_GUARD_RATIO if threshold is None else threshold
    ok = abs(params.delta_A) >= threshold * params.gamma
    if not ok:
        logger.warning(
            "dispersive_guard_violated",
            delta_A=params.delta_A,
            gamma=params.gamma,
            threshold=threshold,
        )
    return ok
