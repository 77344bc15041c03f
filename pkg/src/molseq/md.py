"""Molecular dynamics harness: NVE / Langevin-NVT integration over pluggable
force providers, the interatomic-distance observable, and drift diagnostics.

Internal units: eV, Angstrom, amu; one internal time unit is
1 A * sqrt(amu / eV), with the fs conversion derived from physical constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import constants as sc

from .frames import ARGON_MASS, ARGON_Z, MolecularFrame, lj_energy_forces

# 1 internal time unit in seconds, and the fs -> internal conversion.
_T_INTERNAL_S = 1e-10 * math.sqrt(sc.atomic_mass / sc.electron_volt)
FS_TO_INTERNAL = 1e-15 / _T_INTERNAL_S  # ~0.0982269
KB_EV = sc.k / sc.electron_volt  # Boltzmann constant in eV/K

ATOMIC_MASSES_AMU = {1: 1.008, 6: 12.011, 7: 14.007, 8: 15.999, ARGON_Z: ARGON_MASS}

# A provider maps (positions, elements, charge, spin) -> (energy eV, forces eV/A).
ForceProvider = Callable[[np.ndarray, Sequence[int], int, int], tuple[float, np.ndarray]]


@dataclass
class MDState:
    positions: np.ndarray  # (n, 3) A
    velocities: np.ndarray  # (n, 3) A / internal time
    masses: np.ndarray  # (n,) amu
    elements: list[int]
    charge: int = 0
    spin: int = 0
    # Cached provider outputs for the current positions.
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        n = self.positions.shape[0]
        if self.velocities.shape != (n, 3) or self.masses.shape != (n,):
            raise ValueError("inconsistent state shapes")
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")

    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.masses[:, None] * self.velocities**2))


@dataclass
class Trajectory:
    positions: list[np.ndarray]
    potential_energies: list[float]
    kinetic_energies: list[float]
    timestep_fs: float
    sample_stride: int
    elements: list[int]
    thermostat: Optional[dict] = None
    unstable: bool = False

    @property
    def total_energies(self) -> np.ndarray:
        return np.array(self.potential_energies) + np.array(self.kinetic_energies)

    @property
    def n_samples(self) -> int:
        return len(self.positions)


def lj_provider(positions, elements, charge=0, spin=0):
    """Analytic Lennard-Jones oracle provider."""
    return lj_energy_forces(positions)


def model_provider(params, model_config, codebook, vocab, reference=None, conservative=False) -> ForceProvider:
    """Bind a trained model as a force provider.

    `conservative=True` differentiates the energy head; otherwise the direct
    force head is used.
    """
    from .model import conservative_forces, predict_energy_forces
    from .tokenizer import encode_frame

    def provider(positions, elements, charge=0, spin=0):
        frame = MolecularFrame(
            atomic_numbers=list(elements),
            positions=np.asarray(positions),
            charge=charge,
            spin=spin,
        )
        seq = encode_frame(frame, codebook, vocab, "finetune")
        offset = reference.predict(frame) if reference is not None else 0.0
        if conservative:
            forces, energy = conservative_forces(
                params, model_config, seq, return_energy=True
            )
            return energy + offset, forces
        return predict_energy_forces(params, model_config, seq, offset)

    return provider


def _eval_provider(state: MDState, provider: ForceProvider):
    energy, forces = provider(state.positions, state.elements, state.charge, state.spin)
    forces = np.asarray(forces, dtype=np.float64)
    if not (np.isfinite(energy) and np.all(np.isfinite(forces))):
        raise FloatingPointError("force provider returned non-finite output")
    state.energy = float(energy)
    state.forces = forces


def velocity_verlet_step(state: MDState, provider: ForceProvider, dt_fs: float) -> MDState:
    """Standard half-kick / drift / half-kick update."""
    if dt_fs <= 0:
        raise ValueError("dt must be positive")
    dt = dt_fs * FS_TO_INTERNAL
    if state.forces is None:
        _eval_provider(state, provider)
    inv_m = 1.0 / state.masses[:, None]
    v = state.velocities + 0.5 * dt * state.forces * inv_m
    x = state.positions + dt * v
    new = MDState(
        positions=x,
        velocities=v,
        masses=state.masses,
        elements=state.elements,
        charge=state.charge,
        spin=state.spin,
    )
    _eval_provider(new, provider)
    new.velocities = new.velocities + 0.5 * dt * new.forces * inv_m
    return new


def langevin_step(
    state: MDState,
    provider: ForceProvider,
    dt_fs: float,
    temperature_k: float,
    friction_per_fs: float,
    rng: np.random.Generator,
) -> MDState:
    """BAOAB splitting; the T=0, friction=0 limit reduces to velocity Verlet."""
    if dt_fs <= 0:
        raise ValueError("dt must be positive")
    if temperature_k < 0 or friction_per_fs < 0:
        raise ValueError("temperature and friction must be non-negative")
    dt = dt_fs * FS_TO_INTERNAL
    gamma = friction_per_fs / FS_TO_INTERNAL  # per internal time
    if state.forces is None:
        _eval_provider(state, provider)
    inv_m = 1.0 / state.masses[:, None]
    # B: half kick
    v = state.velocities + 0.5 * dt * state.forces * inv_m
    # A: half drift
    x = state.positions + 0.5 * dt * v
    # O: Ornstein-Uhlenbeck with fluctuation-dissipation noise
    if friction_per_fs > 0:
        c1 = math.exp(-gamma * dt)
        sigma = np.sqrt(KB_EV * temperature_k * (1.0 - c1 * c1) / state.masses)[:, None]
        v = c1 * v + sigma * rng.standard_normal(v.shape)
    # A: half drift
    x = x + 0.5 * dt * v
    new = MDState(
        positions=x,
        velocities=v,
        masses=state.masses,
        elements=state.elements,
        charge=state.charge,
        spin=state.spin,
    )
    # B: half kick with fresh forces
    _eval_provider(new, provider)
    new.velocities = new.velocities + 0.5 * dt * new.forces * inv_m
    return new


def maxwell_boltzmann_velocities(
    masses: np.ndarray, temperature_k: float, rng: np.random.Generator
) -> np.ndarray:
    """Thermal velocities (internal units) with center-of-mass motion removed."""
    masses = np.asarray(masses, dtype=np.float64)
    sigma = np.sqrt(KB_EV * temperature_k / masses)[:, None]
    v = sigma * rng.standard_normal((len(masses), 3))
    p = (masses[:, None] * v).sum(axis=0) / masses.sum()
    return v - p[None, :]


def initial_state(
    frame: MolecularFrame,
    temperature_k: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> MDState:
    masses = np.array(
        [ATOMIC_MASSES_AMU.get(z, 2.0 * z) for z in frame.atomic_numbers]
    )
    if temperature_k > 0:
        if rng is None:
            raise ValueError("rng required for thermal velocities")
        vel = maxwell_boltzmann_velocities(masses, temperature_k, rng)
    else:
        vel = np.zeros_like(frame.positions)
    return MDState(
        positions=frame.positions.copy(),
        velocities=vel,
        masses=masses,
        elements=list(frame.atomic_numbers),
        charge=frame.charge,
        spin=frame.spin,
    )


def _run(
    state: MDState,
    provider: ForceProvider,
    dt_fs: float,
    n_steps: int,
    sample_stride: int,
    step_fn,
    thermostat_meta: Optional[dict],
) -> Trajectory:
    if sample_stride < 1:
        raise ValueError("sample_stride must be >= 1")
    traj = Trajectory(
        positions=[],
        potential_energies=[],
        kinetic_energies=[],
        timestep_fs=dt_fs,
        sample_stride=sample_stride,
        elements=list(state.elements),
        thermostat=thermostat_meta,
    )
    try:
        if state.forces is None:
            _eval_provider(state, provider)
    except FloatingPointError:
        traj.unstable = True
        return traj

    def sample(s: MDState):
        traj.positions.append(s.positions.copy())
        traj.potential_energies.append(s.energy)
        traj.kinetic_energies.append(s.kinetic_energy())

    sample(state)
    for step in range(1, n_steps + 1):
        try:
            state = step_fn(state)
        except FloatingPointError:
            traj.unstable = True
            break
        if step % sample_stride == 0:
            sample(state)
    return traj


def run_nve(
    state: MDState,
    provider: ForceProvider,
    dt_fs: float,
    n_steps: int,
    sample_stride: int = 1,
) -> Trajectory:
    return _run(
        state,
        provider,
        dt_fs,
        n_steps,
        sample_stride,
        lambda s: velocity_verlet_step(s, provider, dt_fs),
        thermostat_meta=None,
    )


def run_nvt(
    state: MDState,
    provider: ForceProvider,
    dt_fs: float,
    n_steps: int,
    temperature_k: float,
    friction_per_fs: float,
    rng: np.random.Generator,
    sample_stride: int = 1,
) -> Trajectory:
    meta = {"temperature_k": temperature_k, "friction_per_fs": friction_per_fs}
    return _run(
        state,
        provider,
        dt_fs,
        n_steps,
        sample_stride,
        lambda s: langevin_step(s, provider, dt_fs, temperature_k, friction_per_fs, rng),
        thermostat_meta=meta,
    )


def h_of_r(trajectory: Trajectory, r_max: float = 10.0, n_bins: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Normalized interatomic-distance histogram averaged over samples.

    Returns (bin_centers, masses); each frame's ordered pairs i != j carry
    weight 1/(n(n-1)), so the masses sum to 1 when all pairs fall inside
    [0, r_max].
    """
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    if trajectory.n_samples < 1:
        raise ValueError("trajectory has no samples")
    edges = np.linspace(0.0, r_max, n_bins + 1)
    acc = np.zeros(n_bins)
    for pos in trajectory.positions:
        n = pos.shape[0]
        if n < 2:
            continue
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        pairs = dist[~np.eye(n, dtype=bool)]
        hist, _ = np.histogram(pairs, bins=edges)
        acc += hist / (n * (n - 1))
    acc /= trajectory.n_samples
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, acc


def h_mae(h_pred: np.ndarray, h_ref: np.ndarray, bin_width: float) -> float:
    """Discretized integral of |h* - h^| over r."""
    h_pred = np.asarray(h_pred)
    h_ref = np.asarray(h_ref)
    if h_pred.shape != h_ref.shape:
        raise ValueError(f"binning mismatch: {h_pred.shape} vs {h_ref.shape}")
    return float(bin_width * np.abs(h_pred - h_ref).sum())


def energy_drift(trajectory: Trajectory, eps: float = 1e-12) -> float:
    """max_t |E(t) - E(0)| / max(|E(0)|, eps) over sampled total energies."""
    e = trajectory.total_energies
    if len(e) == 0:
        raise ValueError("empty trajectory")
    return float(np.max(np.abs(e - e[0])) / max(abs(e[0]), eps))
