"""Kabsch alignment and aligned RMSD."""

import numpy as np
import pytest

from pathbias import geometry


def test_identity_alignment():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(5, 3))
    t = geometry.kabsch_align(P, P)
    assert np.max(np.abs(t.rotation - np.eye(3))) < 1e-10
    assert np.max(np.abs(t.translation)) < 1e-10


def test_construct_then_recover():
    rng = np.random.default_rng(1)
    for _ in range(50):
        P = rng.normal(size=(6, 3))
        g = geometry.random_rigid(rng, 3)
        Q = g.apply(P)
        t = geometry.kabsch_align(P, Q)
        assert np.linalg.norm(t.apply(Q) - P) < 1e-9


def test_alignment_beats_random_transforms():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(5, 3))
    Q = rng.normal(size=(5, 3))
    best = geometry.kabsch_align(P, Q)
    best_res = np.linalg.norm(P - best.apply(Q))
    for _ in range(1000):
        g = geometry.random_rigid(rng, 3)
        assert best_res <= np.linalg.norm(P - g.apply(Q)) + 1e-12


def test_rmsd_rigid_invariance_and_symmetry():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(4, 3))
    Q = rng.normal(size=(4, 3))
    base = geometry.aligned_rmsd(P, Q)
    for _ in range(20):
        g = geometry.random_rigid(rng, 3)
        assert abs(geometry.aligned_rmsd(g.apply(P), Q) - base) < 1e-9
    assert abs(geometry.aligned_rmsd(Q, P) - base) < 1e-9


def test_reflection_never_returned():
    # mirrored cloud forces the SVD determinant correction path
    rng = np.random.default_rng(4)
    P = rng.normal(size=(5, 3))
    Q = P.copy()
    Q[:, 0] = -Q[:, 0]
    t = geometry.kabsch_align(P, Q)
    assert np.linalg.det(t.rotation) > 0.999999
    assert np.max(np.abs(t.rotation.T @ t.rotation - np.eye(3))) < 1e-10
    # a reflection cannot be undone by a proper rotation
    assert geometry.aligned_rmsd(P, Q) > 0.1


def test_degenerate_cloud_pure_translation():
    P = np.ones((4, 3)) * 2.0
    Q = np.ones((4, 3)) * -1.0
    t = geometry.kabsch_align(P, Q)
    assert np.array_equal(t.rotation, np.eye(3))
    assert np.allclose(t.apply(Q), P)


def test_identical_clouds_zero_rmsd_and_2d_passthrough():
    rng = np.random.default_rng(5)
    P = rng.normal(size=(3, 2))
    assert geometry.aligned_rmsd(P, P, align=False) == 0.0
    a = np.array([[0.3, -0.4]])
    b = np.array([[0.0, 0.0]])
    assert abs(geometry.aligned_rmsd(a, b, align=False) - 0.5) < 1e-14


def test_single_atom_perturbation_bound():
    rng = np.random.default_rng(6)
    P = rng.normal(size=(4, 3))
    base = geometry.aligned_rmsd(P, P)
    delta = 0.05
    for i in range(4):
        Q = P.copy()
        v = rng.normal(size=3)
        Q[i] += delta * v / np.linalg.norm(v)
        moved = geometry.aligned_rmsd(P, Q)
        assert moved - base <= delta / np.sqrt(4) + 1e-12


def test_batch_matches_single():
    rng = np.random.default_rng(7)
    Q = rng.normal(size=(5, 3))
    P = rng.normal(size=(8, 5, 3))
    rots, trans = geometry.kabsch_align_batch(P, Q)
    for i in range(8):
        t = geometry.kabsch_align(P[i], Q)
        assert np.max(np.abs(rots[i] - t.rotation)) < 1e-10
        assert np.max(np.abs(trans[i] - t.translation)) < 1e-10


def test_transform_inverse_compose():
    rng = np.random.default_rng(8)
    g = geometry.random_rigid(rng, 3)
    gi = g.inverse()
    both = g.compose(gi)
    assert np.max(np.abs(both.rotation - np.eye(3))) < 1e-12
    assert np.max(np.abs(both.translation)) < 1e-12


def test_shape_errors():
    with pytest.raises(ValueError):
        geometry.kabsch_align(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        geometry.kabsch_align(np.zeros((3, 4)), np.zeros((3, 4)))
