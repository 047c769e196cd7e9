"""Dynamical systems: potentials, forces, endpoints, target-region tests.

Two systems are registered:

* ``double_well`` — the planar dual-channel double well
      U(x, y) = (1/6) * (4(1-x^2-y^2)^2 + 2(x^2-2)^2
                         + ((x+y)^2-1)^2 + ((x-y)^2-1)^2 - 2)
  with two mirror-symmetric minima on the x axis and one saddle per channel
  at (0, +/-1).  Overdamped dynamics, identity collective variable.

* ``chain4`` — a small 3-D chain of four particles with harmonic bonds and
  angles plus a two-well cosine dihedral term.  Its endpoints are the two
  dihedral minima (mirror images, so rigid alignment actually matters).
  Exists to exercise the 3-D machinery; no quantitative claims attach to it.

Positions are flat float64 vectors of length ``n_atoms * spatial_dim``;
every function also accepts a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad


class SystemError(ValueError):
    """Raised for invalid system construction or queries."""


class EvalCounter:
    """Counts potential-energy and force evaluations (one per state)."""

    def __init__(self):
        self.energy = 0
        self.force = 0

    def reset(self):
        self.energy = 0
        self.force = 0


@dataclass(frozen=True)
class CriticalPoint:
    position: np.ndarray
    energy: float
    kind: str  # "minimum" | "saddle" | "maximum"


@dataclass(frozen=True)
class SystemSpec:
    """Immutable description of a stochastic dynamical system.

    ``mode`` selects the integrator family: "overdamped" evolves positions
    only, "underdamped" carries velocities.  ``masses`` is per-coordinate.
    The evaluation counter is bookkeeping, not physics, and is the one
    mutable member.
    """

    name: str
    n_atoms: int
    spatial_dim: int
    masses: np.ndarray
    gamma: float
    boltzmann: float
    base_temperature: float
    dt: float
    n_steps: int
    mode: str
    target_radius: float
    use_alignment: bool
    R_A: np.ndarray
    R_B: np.ndarray
    _energy_fn: object
    _force_fn: object
    _cv_fn: object
    counter: EvalCounter = field(default_factory=EvalCounter)

    def __post_init__(self):
        if np.any(self.masses <= 0):
            raise SystemError("masses must be positive")
        if self.gamma <= 0 or self.target_radius <= 0 or self.boltzmann <= 0:
            raise SystemError("gamma, target radius, and boltzmann must be positive")
        if self.mode not in ("overdamped", "underdamped"):
            raise SystemError(f"unknown mode {self.mode!r}")
        if np.allclose(self.R_A, self.R_B):
            raise SystemError("endpoints coincide")
        if not np.all(np.isfinite([self.energy(self.R_A), self.energy(self.R_B)])):
            raise SystemError("endpoint energies are not finite")
        sep = np.linalg.norm(self.cv(self.R_A) - self.cv(self.R_B))
        if sep <= 2 * self.target_radius:
            raise SystemError(
                f"endpoint CV separation {sep:.3f} <= 2*target_radius; regions overlap")
        self.counter.reset()

    @property
    def dim(self) -> int:
        return self.n_atoms * self.spatial_dim

    def _check_dim(self, R: np.ndarray) -> np.ndarray:
        R = np.asarray(R, dtype=np.float64)
        if R.shape[-1] != self.dim:
            raise SystemError(f"position dim {R.shape[-1]} != system dim {self.dim}")
        return R

    def energy(self, R: np.ndarray) -> np.ndarray:
        """Potential energy U(R); batched over a leading axis if present."""
        R = self._check_dim(R)
        batch = R.reshape(-1, self.dim)
        self.counter.energy += batch.shape[0]
        out = self._energy_fn(batch)
        return out.reshape(R.shape[:-1])

    def force(self, R: np.ndarray) -> np.ndarray:
        """-grad U(R)."""
        R = self._check_dim(R)
        batch = R.reshape(-1, self.dim)
        self.counter.force += batch.shape[0]
        out = self._force_fn(batch)
        if not np.all(np.isfinite(out)):
            raise SystemError("non-finite force")
        return out.reshape(R.shape)

    def gradient(self, R: np.ndarray) -> np.ndarray:
        """grad U(R), without touching the force counter (internal searches)."""
        R = self._check_dim(R)
        batch = R.reshape(-1, self.dim)
        return -self._force_fn(batch).reshape(R.shape)

    def cv(self, R: np.ndarray) -> np.ndarray:
        R = self._check_dim(R)
        batch = R.reshape(-1, self.dim)
        out = self._cv_fn(batch)
        return out.reshape(R.shape[:-1] + (out.shape[-1],))

    def in_target(self, R: np.ndarray) -> np.ndarray:
        """Hard target-region membership: ||cv(R) - cv(R_B)|| < target_radius."""
        delta = self.cv(R) - self.cv(self.R_B)
        return np.linalg.norm(delta, axis=-1) < self.target_radius

    def noise_scale(self, temperature: float) -> np.ndarray:
        """Per-coordinate diffusion amplitude sqrt(2 gamma k_B T / m)."""
        if temperature <= 0:
            raise SystemError("temperature must be positive")
        return np.sqrt(2.0 * self.gamma * self.boltzmann * temperature / self.masses)


# ---------------------------------------------------------------------------
# Double well.

# Calibrated so that at 1200 K the barrier (1.083 energy units) is rarely
# crossed within the default horizon while 2400-4800 K show the expected
# hit-rate ladder; the reported energies stay in the potential's own units.
DOUBLE_WELL_BOLTZMANN = 8.5e-5


def double_well_energy(R: np.ndarray) -> np.ndarray:
    x, y = R[..., 0], R[..., 1]
    x2, y2 = x * x, y * y
    s, d = x + y, x - y
    return (4.0 * (1.0 - x2 - y2) ** 2 + 2.0 * (x2 - 2.0) ** 2
            + (s * s - 1.0) ** 2 + (d * d - 1.0) ** 2 - 2.0) / 6.0


def double_well_grad(R: np.ndarray) -> np.ndarray:
    x, y = R[..., 0], R[..., 1]
    x2, y2 = x * x, y * y
    s, d = x + y, x - y
    common = -16.0 * (1.0 - x2 - y2)
    gs = 4.0 * s * (s * s - 1.0)
    gd = 4.0 * d * (d * d - 1.0)
    gx = (common * x + 8.0 * x * (x2 - 2.0) + gs + gd) / 6.0
    gy = (common * y + gs - gd) / 6.0
    return np.stack([gx, gy], axis=-1)


def _hessian_fd(grad_fn, X: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Hessian from an analytic gradient; (S, d, d)."""
    S, d = X.shape
    H = np.empty((S, d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        H[:, :, j] = (grad_fn(X + e) - grad_fn(X - e)) / (2.0 * h)
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))


_DEGENERATE_EIG_TOL = 1e-5


def _polish_flat_direction(grad_fn, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Line-minimize |grad|^2 along a near-null Hessian direction.

    Newton stalls early along quartic-flat directions (gradient ~ t^3), so
    converged candidates scatter along them; this pins the representative.
    """
    from scipy.optimize import minimize_scalar

    def gn2(t):
        gr = grad_fn((p + t * v)[None, :])[0]
        return float(gr @ gr)

    res = minimize_scalar(gn2, bounds=(-0.02, 0.02), method="bounded",
                          options={"xatol": 1e-13})
    return p + res.x * v


def _probe_degenerate(system: SystemSpec, p: np.ndarray, v: np.ndarray,
                      w: np.ndarray) -> float:
    """Effective curvature sign along flat direction v, relaxing transverse w.

    Straight-line probes miss instabilities of bent valleys (the descending
    direction curves away), so each probe re-minimizes over the transverse
    coordinate.  Returns -1 if energy drops on both sides, +1 otherwise.
    """
    from scipy.optimize import minimize_scalar

    e0 = float(system._energy_fn(p[None, :])[0])
    drops = 0
    for t in (-0.08, 0.08):
        res = minimize_scalar(
            lambda s: float(system._energy_fn((p + t * v + s * w)[None, :])[0]),
            bounds=(-0.3, 0.3), method="bounded", options={"xatol": 1e-10})
        if res.fun < e0 - 1e-10:
            drops += 1
    return -1.0 if drops == 2 else 1.0


def find_critical_points(system: SystemSpec, box=None, resolution: int = 41,
                         dedup_radius: float = 1e-4) -> list[CriticalPoint]:
    """Stationary points of U inside ``box`` via multi-start damped Newton.

    Starts a Newton iteration from every grid node, converges each to a
    stationary point (gradient norm < 1e-8), deduplicates, and classifies by
    Hessian eigenvalue signs.  Degenerate (near-zero curvature) directions
    are classified by a transverse-relaxed energy probe, which correctly
    labels quartic-flat channel saddles.  Only low-dimensional systems are
    supported (the search grid is dense).
    """
    if system.dim > 3:
        raise SystemError("critical-point grid search only supported for dim <= 3")
    if box is None:
        box = [(-2.0, 2.0)] * system.dim
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=-1)

    grad_fn = lambda P: system.gradient(P)
    for _ in range(80):
        g = grad_fn(X)
        H = _hessian_fd(grad_fn, X)
        H_damped = H + 1e-10 * np.eye(system.dim)
        try:
            step = np.linalg.solve(H_damped, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            H_damped = H + 1e-6 * np.eye(system.dim)
            step = np.linalg.solve(H_damped, g[..., None])[..., 0]
        norms = np.linalg.norm(step, axis=-1, keepdims=True)
        step = np.where(norms > 0.25, step * (0.25 / np.maximum(norms, 1e-300)), step)
        X = X - step
        if np.max(np.linalg.norm(grad_fn(X), axis=-1)) < 1e-12:
            break

    g = grad_fn(X)
    lo = np.array([b[0] for b in box]) - 1e-6
    hi = np.array([b[1] for b in box]) + 1e-6
    ok = (np.linalg.norm(g, axis=-1) < 1e-8) & np.all(X >= lo, axis=-1) & np.all(X <= hi, axis=-1)

    # Coarse dedup first (candidates scatter along flat directions), then
    # polish each representative and dedup again at the requested radius.
    coarse: list[np.ndarray] = []
    for p in X[ok]:
        if not any(np.linalg.norm(p - q) < max(dedup_radius, 5e-3) for q in coarse):
            coarse.append(p)

    polished: list[np.ndarray] = []
    for p in coarse:
        H = _hessian_fd(grad_fn, p[None, :])[0]
        eigvals, eigvecs = np.linalg.eigh(H)
        for k in range(system.dim):
            if abs(eigvals[k]) < _DEGENERATE_EIG_TOL:
                p = _polish_flat_direction(grad_fn, p, eigvecs[:, k])
        if np.linalg.norm(grad_fn(p[None, :])[0]) < 1e-8:
            polished.append(p)

    accepted: list[np.ndarray] = []
    for p in polished:
        if not any(np.linalg.norm(p - q) < dedup_radius for q in accepted):
            accepted.append(p)

    points = []
    for p in accepted:
        H = _hessian_fd(grad_fn, p[None, :])[0]
        eigvals, eigvecs = np.linalg.eigh(H)
        signs = np.sign(eigvals)
        for k in range(system.dim):
            if abs(eigvals[k]) < _DEGENERATE_EIG_TOL:
                if system.dim != 2:
                    raise SystemError("degenerate classification only implemented for 2-D")
                other = eigvecs[:, 1 - k]
                signs[k] = _probe_degenerate(system, p, eigvecs[:, k], other)
        if np.all(signs > 0):
            kind = "minimum"
        elif np.all(signs < 0):
            kind = "maximum"
        else:
            kind = "saddle"
        points.append(CriticalPoint(p.copy(), float(system._energy_fn(p[None, :])[0]), kind))

    points.sort(key=lambda cp: (cp.energy, tuple(cp.position)))
    if not any(cp.kind == "minimum" for cp in points):
        raise SystemError("no minima found in search box")
    return points


@lru_cache(maxsize=None)
def _double_well_endpoints() -> tuple:
    """Locate the two minima numerically; left one is the start state."""
    probe = _bare_double_well()
    points = find_critical_points(probe)
    minima = [cp for cp in points if cp.kind == "minimum"]
    if len(minima) != 2:
        raise SystemError(f"double well should have 2 minima, found {len(minima)}")
    minima.sort(key=lambda cp: cp.position[0])
    return tuple(cp.position.copy() for cp in minima)


def _bare_double_well() -> SystemSpec:
    """Double-well spec with placeholder endpoints, used only for the search."""
    return SystemSpec(
        name="double_well", n_atoms=1, spatial_dim=2,
        masses=np.ones(2), gamma=1.0, boltzmann=DOUBLE_WELL_BOLTZMANN,
        base_temperature=1200.0, dt=0.01, n_steps=1000, mode="overdamped",
        target_radius=0.5, use_alignment=False,
        R_A=np.array([-1.0, 0.0]), R_B=np.array([1.0, 0.0]),
        _energy_fn=double_well_energy,
        _force_fn=lambda R: -double_well_grad(R),
        _cv_fn=lambda R: R.copy(),
    )


def make_double_well(temperature: float = 1200.0, dt: float = 0.01,
                     n_steps: int = 1000, boltzmann: float = DOUBLE_WELL_BOLTZMANN) -> SystemSpec:
    R_A, R_B = _double_well_endpoints()
    return SystemSpec(
        name="double_well", n_atoms=1, spatial_dim=2,
        masses=np.ones(2), gamma=1.0, boltzmann=boltzmann,
        base_temperature=temperature, dt=dt, n_steps=n_steps, mode="overdamped",
        target_radius=0.5, use_alignment=False,
        R_A=R_A.copy(), R_B=R_B.copy(),
        _energy_fn=double_well_energy,
        _force_fn=lambda R: -double_well_grad(R),
        _cv_fn=lambda R: R.copy(),
    )


# ---------------------------------------------------------------------------
# 4-particle 3-D chain.

CHAIN4_BOND_K = 100.0
CHAIN4_BOND_R0 = 1.0
CHAIN4_ANGLE_K = 20.0
CHAIN4_ANGLE_COS0 = np.cos(1.9106332362490186)  # ~109.47 deg
CHAIN4_DIHEDRAL_K = 5.0
CHAIN4_DIHEDRAL_PHI0 = 1.3  # rad; two wells at +/- phi0


def _cross_tape(u, v):
    """Cross product of (B, 3) tape tensors, built from slices."""
    ux, uy, uz = u[:, 0:1], u[:, 1:2], u[:, 2:3]
    vx, vy, vz = v[:, 0:1], v[:, 1:2], v[:, 2:3]
    return ad.concat([
        ad.sub(ad.mul(uy, vz), ad.mul(uz, vy)),
        ad.sub(ad.mul(uz, vx), ad.mul(ux, vz)),
        ad.sub(ad.mul(ux, vy), ad.mul(uy, vx)),
    ], axis=1)


def _chain4_energy_tape(tape: "ad.Tape", R: "ad.Tensor") -> "ad.Tensor":
    """(B, 12) positions -> (B,) energy, fully on the tape."""
    atoms = [R[:, 3 * i:3 * i + 3] for i in range(4)]
    bonds = [ad.sub(atoms[i + 1], atoms[i]) for i in range(3)]

    def norm(vec):
        return ad.sqrt(ad.tsum(ad.square(vec), axis=1, keepdims=True))

    def rowdot(a, b):
        return ad.tsum(ad.mul(a, b), axis=1, keepdims=True)

    energy = None
    for b in bonds:
        stretch = ad.sub(norm(b), tape.constant(CHAIN4_BOND_R0))
        term = ad.mul(ad.square(stretch), tape.constant(CHAIN4_BOND_K))
        energy = term if energy is None else ad.add(energy, term)

    for i in (1, 2):  # angles at atoms 1 and 2
        u = ad.sub(atoms[i - 1], atoms[i])
        v = ad.sub(atoms[i + 1], atoms[i])
        cos_th = ad.mul(rowdot(u, v), ad.recip(ad.mul(norm(u), norm(v))))
        term = ad.mul(ad.square(ad.sub(cos_th, tape.constant(CHAIN4_ANGLE_COS0))),
                      tape.constant(CHAIN4_ANGLE_K))
        energy = ad.add(energy, term)

    n1 = _cross_tape(bonds[0], bonds[1])
    n2 = _cross_tape(bonds[1], bonds[2])
    cos_phi = ad.mul(rowdot(n1, n2), ad.recip(ad.mul(norm(n1), norm(n2))))
    term = ad.mul(ad.square(ad.sub(cos_phi, tape.constant(np.cos(CHAIN4_DIHEDRAL_PHI0)))),
                  tape.constant(CHAIN4_DIHEDRAL_K))
    energy = ad.add(energy, term)
    return ad.tsum(energy, axis=1)


def chain4_energy(R: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    t = tape.constant(R.reshape(-1, 12))
    return _chain4_energy_tape(tape, t).data.copy()


def chain4_force(R: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    t = tape.input(R.reshape(-1, 12))
    e = _chain4_energy_tape(tape, t)
    (g,) = ad.gradient(ad.tsum(e), [t])
    return -g.data.copy()


def chain4_dihedral(R: np.ndarray) -> np.ndarray:
    """Signed dihedral angle of the 4 atoms; batched."""
    R = R.reshape(-1, 4, 3)
    b = np.diff(R, axis=1)
    n1 = np.cross(b[:, 0], b[:, 1])
    n2 = np.cross(b[:, 1], b[:, 2])
    m = np.cross(n1, b[:, 1] / np.linalg.norm(b[:, 1], axis=-1, keepdims=True))
    x = np.sum(n1 * n2, axis=-1)
    y = np.sum(m * n2, axis=-1)
    return np.arctan2(y, x)


def chain4_cv(R: np.ndarray) -> np.ndarray:
    phi = chain4_dihedral(R)
    return np.stack([np.cos(phi), np.sin(phi)], axis=-1)


def _chain4_ideal(phi: float) -> np.ndarray:
    """Build a chain with ideal bonds/angles and the given dihedral."""
    theta = np.arccos(CHAIN4_ANGLE_COS0)
    a0 = np.array([0.0, 0.0, 0.0])
    a1 = np.array([1.0, 0.0, 0.0])
    a2 = a1 + np.array([-np.cos(theta), np.sin(theta), 0.0])
    bc = a2 - a1
    bc /= np.linalg.norm(bc)
    n = np.cross(a1 - a0, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d = -np.cos(theta) * bc + np.sin(theta) * np.cos(phi) * m + np.sin(theta) * np.sin(phi) * n
    a3 = a2 + d
    return np.concatenate([a0, a1, a2, a3])


@lru_cache(maxsize=None)
def _chain4_endpoints() -> tuple:
    endpoints = []
    for phi in (-CHAIN4_DIHEDRAL_PHI0, CHAIN4_DIHEDRAL_PHI0):
        x0 = _chain4_ideal(phi)
        res = minimize(lambda x: chain4_energy(x[None, :] if x.ndim == 1 else x).item(),
                       x0, jac=lambda x: -chain4_force(x).ravel(),
                       method="BFGS", options={"gtol": 1e-10, "maxiter": 500})
        endpoints.append(res.x.copy())
    return tuple(endpoints)


def make_chain4(temperature: float = 1200.0, dt: float = 0.002,
                n_steps: int = 500, mode: str = "underdamped") -> SystemSpec:
    R_A, R_B = _chain4_endpoints()
    masses = np.repeat(np.array([1.0, 1.5, 1.5, 1.0]), 3)
    return SystemSpec(
        name="chain4", n_atoms=4, spatial_dim=3,
        masses=masses, gamma=1.0, boltzmann=DOUBLE_WELL_BOLTZMANN,
        base_temperature=temperature, dt=dt, n_steps=n_steps, mode=mode,
        target_radius=0.5, use_alignment=True,
        R_A=R_A.copy(), R_B=R_B.copy(),
        _energy_fn=chain4_energy,
        _force_fn=chain4_force,
        _cv_fn=chain4_cv,
    )


SYSTEMS = {
    "double_well": make_double_well,
    "chain4": make_chain4,
}


def get_system(name: str, **kwargs) -> SystemSpec:
    if name not in SYSTEMS:
        raise SystemError(f"unknown system {name!r}; known: {sorted(SYSTEMS)}")
    return SYSTEMS[name](**kwargs)
