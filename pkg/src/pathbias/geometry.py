"""Optimal rigid alignment (Kabsch) and aligned RMSD.

Conventions: point clouds are (N, d) arrays with d in {2, 3}.  A
``RigidTransform`` acts on a cloud by ``X @ R.T + t``.  ``kabsch_align(P, Q)``
returns the proper rigid transform minimizing ``‖P - rho(Q)‖`` so the *target*
cloud Q is carried onto the reference P.  For planar (d=2) systems the rest of
the package skips alignment entirely; the functions here still support d=2 for
completeness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R x + t with det(R) = +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return vectors @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


def identity_transform(dim: int) -> RigidTransform:
    return RigidTransform(np.eye(dim), np.zeros(dim))


def kabsch_align(P: np.ndarray, Q: np.ndarray) -> RigidTransform:
    """Proper rigid transform rho minimizing ``‖P - rho(Q)‖``.

    Centroid subtraction followed by SVD of the d x d cross-covariance, with
    the usual determinant sign correction so reflections are never returned.
    Degenerate clouds (all points coincident, N = 1) yield a pure translation.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"point clouds differ in shape: {P.shape} vs {Q.shape}")
    if P.ndim != 2 or P.shape[1] not in (2, 3):
        raise ValueError(f"expected (N, d) with d in {{2,3}}, got {P.shape}")
    pc = P.mean(axis=0)
    qc = Q.mean(axis=0)
    H = (Q - qc).T @ (P - pc)
    if not np.any(np.abs(H) > 1e-300):
        return RigidTransform(np.eye(P.shape[1]), pc - qc)
    U, _s, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0.0:
        d = 1.0
    D = np.eye(P.shape[1])
    D[-1, -1] = d
    R = Vt.T @ D @ U.T
    return RigidTransform(R, pc - R @ qc)


def aligned_rmsd(P: np.ndarray, Q: np.ndarray, align: bool = True) -> float:
    """Root-mean-square atom distance after optimal superposition of Q onto P.

    With ``align=False`` (used for planar systems) the plain per-atom RMSD is
    returned without any superposition.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if align and P.shape[1] == 3:
        Q = kabsch_align(P, Q).apply(Q)
    delta = P - Q
    return float(np.sqrt(np.sum(delta * delta) / P.shape[0]))


def kabsch_align_batch(P: np.ndarray, Q: np.ndarray) -> tuple:
    """Vectorized Kabsch: align one target cloud Q onto a batch of clouds P.

    P is (B, N, d), Q is (N, d).  Returns (rotations (B, d, d),
    translations (B, d)) such that ``Q @ R[b].T + t[b]`` superimposes Q onto
    ``P[b]``.  Degenerate batch members fall back to pure translation.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    B, N, d = P.shape
    pc = P.mean(axis=1)
    qc = Q.mean(axis=0)
    Pc = P - pc[:, None, :]
    Qc = Q - qc
    H = np.einsum("ni,bnj->bij", Qc, Pc)
    degenerate = ~np.any(np.abs(H) > 1e-300, axis=(1, 2))
    H[degenerate] = np.eye(d)
    U, _s, Vt = np.linalg.svd(H)
    det = np.linalg.det(np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1)))
    D = np.tile(np.eye(d), (B, 1, 1))
    D[:, -1, -1] = np.where(det < 0, -1.0, 1.0)
    R = np.transpose(Vt, (0, 2, 1)) @ D @ np.transpose(U, (0, 2, 1))
    R[degenerate] = np.eye(d)
    t = pc - np.einsum("bij,j->bi", R, qc)
    return R, t


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Haar-ish random proper rotation via QR with sign fixing."""
    A = rng.normal(size=(dim, dim))
    Qm, Rm = np.linalg.qr(A)
    Qm = Qm * np.sign(np.diag(Rm))
    if np.linalg.det(Qm) < 0:
        Qm[:, 0] = -Qm[:, 0]
    return Qm


def random_rigid(rng: np.random.Generator, dim: int, translation_scale: float = 2.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng, dim),
                          rng.normal(scale=translation_scale, size=dim))
