"""
Finite-Size Stochastic Trajectories
===================================

The atom budget is an integer number of quanta, each carrying
n_atoms_total / n_atoms of population. Between loss events the fast
variables sit on the relaxed slow manifold; every ``dt_jump`` the number of
quanta pumped into dark states is drawn from a Poisson law with mean
2 Gamma N_e dt / quantum, N_e taken at the half step. Detected photons are
Poisson counts on top of the intracavity photon number.

Random streams: ``SeedSequence(rng_seed).spawn(2)`` gives independent jump
and detector generators; ensemble members get ``derive_seed(seed, index)``.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
import structlog
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from core_model import PhysicalParams
from meanfield import Trajectory, adiabatic_inversion, manifold_state, output_grid

logger = structlog.get_logger(__name__)

COUNT_COLUMNS = ["t_us", "counts"]
ENSEMBLE_COLUMNS = ["t_us", "mean_photons", "stderr_photons"]
MAX_SEED = 2 ** 64 - 1


class StochasticConfig(BaseModel):
    """Jump-process and photodetection settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_atoms: int = Field(default=10_000, ge=1, description="integer atom budget")
    rng_seed: int = Field(default=0, ge=0, le=MAX_SEED)
    dt_jump: float = Field(default=10.0, gt=0, description="jump-process step (us)")
    detector_efficiency: float = Field(default=1.0, gt=0, le=1)
    bin_time: float = Field(default=1.0, gt=0, description="photodetection bin (us)")
    output_dt: float = Field(default=500.0, gt=0, description="trajectory sampling (us)")
    rescale: Literal["proportional", "excited_only"] = "proportional"


@dataclass(frozen=True)
class CountRecord:
    """Detected photon counts per bin; ``counts * calibration`` is in cavity photons."""

    t: np.ndarray
    counts: np.ndarray
    calibration: float
    bin_time: float
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        counts = np.asarray(self.counts)
        if t.shape != counts.shape:
            raise ValueError(f"count record lengths differ ({t.shape[0]} != {counts.shape[0]})")
        if counts.size and np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if self.calibration <= 0 or self.bin_time <= 0:
            raise ValueError("calibration and bin_time must be positive")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "counts", counts.astype(np.int64))

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def photons(self) -> np.ndarray:
        """Counts converted to intracavity photon number."""
        return self.counts * self.calibration

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t_us": self.t, "counts": self.counts}, columns=COUNT_COLUMNS)


def calibration_factor(kappa: float, cfg: StochasticConfig) -> float:
    """Photons per count, 1 / (2 kappa eps tau_b)."""
    return 1.0 / (2.0 * kappa * cfg.detector_efficiency * cfg.bin_time)


def derive_seed(seed: int, index: int) -> int:
    """Seed of ensemble member ``index``; depends only on (seed, index)."""
    sequence = np.random.SeedSequence(seed, spawn_key=(index,))
    return int(sequence.generate_state(1, np.uint64)[0])


def _streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    jump, detector = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(jump), np.random.default_rng(detector)


def detect_photons(
    t: np.ndarray,
    photons: np.ndarray,
    kappa: float,
    cfg: StochasticConfig,
    rng: np.random.Generator,
    t_end: Optional[float] = None,
) -> CountRecord:
    """
    Photodetection of a piecewise-constant photon-number series

    ``photons[i]`` holds on [t[i], t[i+1]) and the last value holds up to
    ``t_end``. Every full bin of width ``cfg.bin_time`` gets Poisson counts
    with mean eps * 2 kappa * (bin-averaged photons) * tau_b.
    """
    t = np.asarray(t, dtype=float)
    photons = np.asarray(photons, dtype=float)
    if t.shape != photons.shape or t.size == 0:
        raise ValueError("times and photon numbers must be non-empty and of equal length")
    if t_end is None:
        t_end = t[-1] + (t[-1] - t[-2] if t.size > 1 else cfg.bin_time)
    if t_end <= t[0]:
        raise ValueError("t_end must lie after the first sample")

    n_bins = int(math.floor((t_end - t[0]) / cfg.bin_time + 1e-9))
    edges = t[0] + cfg.bin_time * np.arange(n_bins + 1)
    knots = np.append(t, t_end)
    cumulative = np.concatenate([[0.0], np.cumsum(photons * np.diff(knots))])
    integral = np.interp(edges, knots, cumulative)
    mean_photons = np.clip(np.diff(integral) / cfg.bin_time, 0.0, None)

    rate = cfg.detector_efficiency * 2.0 * kappa * cfg.bin_time
    counts = rng.poisson(rate * mean_photons)
    return CountRecord(
        t=edges[:-1],
        counts=counts,
        calibration=calibration_factor(kappa, cfg),
        bin_time=cfg.bin_time,
        metadata={"detector_efficiency": cfg.detector_efficiency, "bin_time": cfg.bin_time},
    )


def _deplete(N_g: float, N_e: float, removed: float, rule: str) -> Tuple[float, float]:
    """Take ``removed`` population out of (N_g, N_e) under the rescale rule."""
    total = N_g + N_e
    if removed <= 0:
        return N_g, N_e
    if removed >= total:
        return 0.0, 0.0
    if rule == "proportional":
        ratio = (total - removed) / total
        return N_g * ratio, N_e * ratio
    from_excited = min(removed, N_e)
    return max(N_g - (removed - from_excited), 0.0), N_e - from_excited


def _relaxed(params: PhysicalParams, N_g: float, N_e: float):
    n = N_g + N_e
    return manifold_state(params, n, adiabatic_inversion(params, n, N_g - N_e))


def simulate_trajectory(
    params: PhysicalParams,
    cfg: StochasticConfig,
    t_end: float,
    t_eval: Optional[np.ndarray] = None,
) -> Tuple[Trajectory, CountRecord]:
    """
    One finite-size trajectory with its detected count record

    The loss over a step of length dt is drawn with the excited population
    of the half-step state, so the ensemble mean follows the population
    equation to second order in dt. Output grid times are jump points, so
    samples are exact manifold states.

    Args:
        params (PhysicalParams): System parameters; ``n_atoms_total`` is the
            population carried by the full budget
        cfg (StochasticConfig): Budget, seed, jump step and detector
        t_end (float): Final time in us
        t_eval (np.ndarray): Trajectory output grid; defaults to ``cfg.output_dt``

    Returns:
        (Trajectory, CountRecord): Manifold states sampled on the output grid
        and Poisson counts over [0, t_end)
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    jump_rng, detector_rng = _streams(cfg.rng_seed)

    quantum = params.n_atoms_total / cfg.n_atoms if params.n_atoms_total > 0 else 0.0
    budget = cfg.n_atoms if quantum > 0 else 0
    lossy = budget > 0 and params.Gamma > 0

    grid = output_grid(t_end, cfg.output_dt) if t_eval is None else np.asarray(t_eval, dtype=float)
    jump_t = np.union1d(output_grid(t_end, cfg.dt_jump), grid[(grid >= 0.0) & (grid <= t_end)])
    n_points = jump_t.size
    a = np.empty(n_points, dtype=complex)
    M = np.empty(n_points, dtype=complex)
    N_g = np.empty(n_points)
    N_e = np.empty(n_points)

    n_total = budget * quantum
    state = manifold_state(params, n_total, adiabatic_inversion(params, n_total, n_total))
    lost_total = 0
    for i in range(n_points):
        a[i], M[i], N_g[i], N_e[i] = state.a, state.M, state.N_g, state.N_e
        if i == n_points - 1 or budget == 0 or not lossy or state.N_e <= 0.0:
            continue
        dt = jump_t[i + 1] - jump_t[i]
        mid = _relaxed(params, *_deplete(state.N_g, state.N_e, params.Gamma * dt * state.N_e, cfg.rescale))
        lost = min(int(jump_rng.poisson(2.0 * params.Gamma * dt * mid.N_e / quantum)), budget)
        if lost == 0:
            continue
        budget -= lost
        lost_total += lost
        n_total = budget * quantum
        n_g, n_e = _deplete(state.N_g, state.N_e, lost * quantum, cfg.rescale)
        state = manifold_state(params, n_total, adiabatic_inversion(params, n_total, n_g - n_e))

    photons = np.abs(a) ** 2
    record = detect_photons(jump_t, photons, params.kappa, cfg, detector_rng, t_end=t_end)
    record.metadata.update({"seed": cfg.rng_seed})

    index = np.clip(np.searchsorted(jump_t, grid * (1 + 1e-12), side="right") - 1, 0, n_points - 1)
    metadata = {
        "integrator": "stochastic",
        "seed": cfg.rng_seed,
        "n_atoms": cfg.n_atoms,
        "quantum": quantum,
        "dt_jump": cfg.dt_jump,
        "rescale": cfg.rescale,
        "lost_quanta": lost_total,
        "final_budget": budget,
    }
    logger.debug("simulate_trajectory.done", seed=cfg.rng_seed, lost=lost_total, final_budget=budget)
    trajectory = Trajectory(t=grid, a=a[index], M=M[index], N_g=N_g[index], N_e=N_e[index], metadata=metadata)
    return trajectory, record


def ensemble_run(
    params: PhysicalParams,
    cfg: StochasticConfig,
    t_end: float,
    n_traj: int,
    threads: int = 1,
    t_eval: Optional[np.ndarray] = None,
    progress: bool = False,
) -> List[Tuple[Trajectory, CountRecord]]:
    """
    Independent trajectories with seeds derived from ``cfg.rng_seed``

    Member i runs with ``derive_seed(cfg.rng_seed, i)``; results come back
    in index order for any thread count.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    configs = [cfg.model_copy(update={"rng_seed": derive_seed(cfg.rng_seed, i)}) for i in range(n_traj)]
    logger.info("ensemble_run.start", n_traj=n_traj, threads=threads, seed=cfg.rng_seed)

    runner = Parallel(n_jobs=threads, prefer="threads", return_as="generator")
    jobs = runner(delayed(simulate_trajectory)(params, member, t_end, t_eval) for member in configs)
    results = list(tqdm(jobs, total=n_traj, desc="trajectories", disable=not progress))
    logger.info("ensemble_run.done", n_traj=n_traj)
    return results


def ensemble_mean(results: List[Tuple[Trajectory, CountRecord]]) -> pd.DataFrame:
    """Mean intracavity photon number over the members and its standard error."""
    if not results:
        raise ValueError("empty ensemble")
    t = results[0][0].t
    if any(not np.array_equal(trajectory.t, t) for trajectory, _ in results):
        raise ValueError("ensemble members are sampled on different grids")
    intensity = np.array([trajectory.intensity for trajectory, _ in results])
    if len(results) > 1:
        stderr = intensity.std(axis=0, ddof=1) / math.sqrt(len(results))
    else:
        stderr = np.zeros(t.size)
    return pd.DataFrame({"t_us": t, "mean_photons": intensity.mean(axis=0), "stderr_photons": stderr},
                        columns=ENSEMBLE_COLUMNS)
