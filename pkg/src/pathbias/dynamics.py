"""Euler-Maruyama simulation of unbiased and biased Langevin dynamics.

Overdamped systems evolve positions only:

    R' = R + (F(R) + b(R)) / m * dt + sigma * sqrt(dt) * eps

Underdamped systems carry velocities; noise acts on the velocity channel
(the position channel is treated as noise-free):

    R' = R + V * dt
    V' = V + ((F(R) + b(R)) / m - gamma * V) * dt + sigma * sqrt(dt) * eps

``sigma = sqrt(2 gamma k_B T / m)`` per coordinate, and ``eps`` is a standard
normal draw that is recorded on the path.  Every path also records the
standardized control values ``v = b / (m sigma)`` of the force that generated
it (gradient-detached by construction), which is exactly what the training
objective later needs to replay the path off-policy.

Randomness: each path owns a counter-based Philox stream keyed by
``(seed, path_id)``, so ensembles are reproducible path-by-path and
independent of batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .systems import SystemSpec


class DynamicsError(RuntimeError):
    pass


@dataclass
class MDState:
    """Instantaneous simulation state; V is None for overdamped systems."""

    R: np.ndarray
    V: np.ndarray | None
    t_index: int


class ZeroBias:
    """The unbiased controller."""

    def bias(self, system: SystemSpec, R: np.ndarray, step_index: int) -> np.ndarray:
        return np.zeros_like(R)


@dataclass
class Path:
    """A discretized trajectory with everything the objective needs.

    ``noises`` are the standardized increments actually drawn; together with
    ``policy_values`` (the generating control, in the generation-temperature
    standardization) and ``gen_temperature`` they reconstruct the trajectory
    exactly.  ``trunc_index`` / ``log_indicator`` / ``log_p0`` are filled in
    by the objective when the path enters a replay buffer.
    """

    positions: np.ndarray            # (L+1, dim)
    velocities: np.ndarray | None    # (L+1, dim) or None
    noises: np.ndarray               # (L, dim) standard-normal draws
    policy_values: np.ndarray        # (L, dim) v of the generating policy
    gen_temperature: float
    seed_key: tuple = ()
    trunc_index: int | None = None
    log_indicator: float | None = None
    log_p0: float | None = None
    features: np.ndarray | None = field(default=None, repr=False)  # lazy cache

    @property
    def length(self) -> int:
        return self.noises.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def final_position(self) -> np.ndarray:
        return self.positions[-1]

    def validate(self, system: SystemSpec, atol: float = 1e-10) -> None:
        """Round-trip identity: recorded noises reproduce the stored states."""
        if self.length < 1:
            raise DynamicsError("path must have at least one step")
        if self.trunc_index is not None and self.trunc_index > self.length:
            raise DynamicsError("truncation index exceeds path length")
        recon = reconstruct_noises(system, self)
        if np.max(np.abs(recon - self.noises)) > atol:
            raise DynamicsError("noise round-trip mismatch")


def drift(system: SystemSpec, state: MDState, bias_force: np.ndarray) -> tuple:
    """Deterministic part of the SDE, as (position_drift, velocity_drift).

    ``velocity_drift`` is None for overdamped systems.  Accepts batched
    states (leading axis on R/V/bias).
    """
    bias_force = np.asarray(bias_force, dtype=np.float64)
    if bias_force.shape != state.R.shape:
        raise DynamicsError(f"bias shape {bias_force.shape} != position shape {state.R.shape}")
    total = system.force(state.R) + bias_force
    if system.mode == "overdamped":
        return total / system.masses, None
    if state.V is None:
        raise DynamicsError("underdamped state requires velocities")
    vel_drift = total / system.masses - system.gamma * state.V
    return state.V.copy(), vel_drift


def step(system: SystemSpec, state: MDState, bias_force: np.ndarray,
         temperature: float, eps: np.ndarray) -> MDState:
    """One Euler-Maruyama step with the given standardized noise draw."""
    sigma = system.noise_scale(temperature)
    sqdt = np.sqrt(system.dt)
    pos_drift, vel_drift = drift(system, state, bias_force)
    if system.mode == "overdamped":
        R = state.R + pos_drift * system.dt + sigma * sqdt * eps
        new = MDState(R, None, state.t_index + 1)
    else:
        R = state.R + pos_drift * system.dt
        V = state.V + vel_drift * system.dt + sigma * sqdt * eps
        new = MDState(R, V, state.t_index + 1)
    if not np.all(np.isfinite(new.R)) or (new.V is not None and not np.all(np.isfinite(new.V))):
        raise DynamicsError(f"non-finite state at step {state.t_index + 1}")
    return new


def standardized_control(system: SystemSpec, bias_force: np.ndarray,
                         temperature: float) -> np.ndarray:
    """v = Sigma^{-1} b / m at the given temperature (velocity block only)."""
    sigma = system.noise_scale(temperature)
    return bias_force / (system.masses * sigma)


def _path_rng(seed: int, path_id: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(path_id)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def rollout_ensemble(system: SystemSpec, controller, n_paths: int,
                     temperature: float | None = None, seed: int = 0,
                     n_steps: int | None = None, first_path_id: int = 0,
                     init_velocity: str = "zero") -> list[Path]:
    """Simulate ``n_paths`` trajectories from R_A under a shared controller.

    Vectorized over the batch; per-path noise comes from per-path Philox
    streams so the result is independent of how paths are batched.
    """
    if n_paths < 1:
        raise DynamicsError("need at least one path")
    L = system.n_steps if n_steps is None else int(n_steps)
    if L < 1:
        raise DynamicsError("need at least one step")
    temp = system.base_temperature if temperature is None else float(temperature)
    dim = system.dim

    noise = np.empty((n_paths, L, dim))
    for i in range(n_paths):
        rng = _path_rng(seed, first_path_id + i)
        noise[i] = rng.standard_normal((L, dim))

    R = np.tile(system.R_A, (n_paths, 1))
    if system.mode == "underdamped":
        if init_velocity == "maxwell":
            V = np.empty((n_paths, dim))
            for i in range(n_paths):
                rng = _path_rng(seed ^ 0x5CA1AB1E, first_path_id + i)
                V[i] = rng.standard_normal(dim) * np.sqrt(
                    system.boltzmann * temp / system.masses)
        else:
            V = np.zeros((n_paths, dim))
    else:
        V = None

    positions = np.empty((n_paths, L + 1, dim))
    velocities = np.empty((n_paths, L + 1, dim)) if V is not None else None
    vvals = np.empty((n_paths, L, dim))
    positions[:, 0] = R
    if velocities is not None:
        velocities[:, 0] = V

    state = MDState(R, V, 0)
    for ell in range(L):
        b = controller.bias(system, state.R, ell)
        vvals[:, ell] = standardized_control(system, b, temp)
        state = step(system, state, b, temp, noise[:, ell])
        positions[:, ell + 1] = state.R
        if velocities is not None:
            velocities[:, ell + 1] = state.V

    paths = []
    for i in range(n_paths):
        paths.append(Path(
            positions=positions[i].copy(),
            velocities=velocities[i].copy() if velocities is not None else None,
            noises=noise[i].copy(),
            policy_values=vvals[i].copy(),
            gen_temperature=temp,
            seed_key=(seed, first_path_id + i),
        ))
    return paths


def rollout(system: SystemSpec, controller, temperature: float | None = None,
            seed: int = 0, n_steps: int | None = None, path_id: int = 0) -> Path:
    """Single-path convenience wrapper; bit-identical to the ensemble member
    with the same (seed, path_id)."""
    return rollout_ensemble(system, controller, 1, temperature=temperature,
                            seed=seed, n_steps=n_steps, first_path_id=path_id)[0]


def reconstruct_noises(system: SystemSpec, path: Path) -> np.ndarray:
    """Invert the integrator: standardized noises from consecutive states."""
    sigma = system.noise_scale(path.gen_temperature)
    sqdt = np.sqrt(system.dt)
    if system.mode == "overdamped":
        R = path.positions
        forces = system.force(R[:-1])
        bias = path.policy_values * (system.masses * sigma)
        driftv = (forces + bias) / system.masses
        return (R[1:] - R[:-1] - driftv * system.dt) / (sigma * sqdt)
    R, V = path.positions, path.velocities
    forces = system.force(R[:-1])
    bias = path.policy_values * (system.masses * sigma)
    vel_drift = (forces + bias) / system.masses - system.gamma * V[:-1]
    return (V[1:] - V[:-1] - vel_drift * system.dt) / (sigma * sqdt)


# ---------------------------------------------------------------------------
# Serialization.

_PATH_MAGIC = b"PBPATH01"


def write_path_binary(fh, path: Path) -> None:
    """Compact container: magic, header ints, then little-endian float64."""
    fh.write(_PATH_MAGIC)
    has_v = 1 if path.velocities is not None else 0
    header = np.array([path.length, path.dim, has_v], dtype="<i8")
    fh.write(header.tobytes())
    fh.write(np.array([path.gen_temperature], dtype="<f8").tobytes())
    fh.write(path.positions.astype("<f8").tobytes())
    if path.velocities is not None:
        fh.write(path.velocities.astype("<f8").tobytes())
    fh.write(path.noises.astype("<f8").tobytes())
    fh.write(path.policy_values.astype("<f8").tobytes())


def read_path_binary(fh) -> Path:
    magic = fh.read(8)
    if magic != _PATH_MAGIC:
        raise DynamicsError(f"bad path container magic: {magic!r}")
    L, dim, has_v = np.frombuffer(fh.read(24), dtype="<i8")
    temp = float(np.frombuffer(fh.read(8), dtype="<f8")[0])

    def arr(rows, cols):
        return np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()

    positions = arr(L + 1, dim)
    velocities = arr(L + 1, dim) if has_v else None
    noises = arr(L, dim)
    vvals = arr(L, dim)
    return Path(positions=positions, velocities=velocities, noises=noises,
                policy_values=vvals, gen_temperature=temp)


def path_to_csv(fh, system: SystemSpec, path: Path) -> None:
    """One row per state: step index, coordinates, potential energy."""
    energies = system.energy(path.positions)
    cols = ",".join(f"x{i}" for i in range(path.dim))
    fh.write(f"step,{cols},energy\n")
    for ell in range(path.length + 1):
        coords = ",".join(repr(float(c)) for c in path.positions[ell])
        fh.write(f"{ell},{coords},{float(energies[ell])!r}\n")
