"""Potentials, forces, critical points, and target-region membership."""

import numpy as np
import pytest

from pathbias import systems
from pathbias.systems import CriticalPoint, SystemError, find_critical_points


@pytest.fixture(scope="module")
def dw():
    return systems.make_double_well()


@pytest.fixture(scope="module")
def chain():
    return systems.make_chain4()


@pytest.fixture(scope="module")
def dw_points(dw):
    return find_critical_points(dw)


def test_origin_energy(dw):
    # (4 + 8 + 1 + 1 - 2) / 6
    assert dw.energy(np.zeros(2)) == 2.0


def test_double_well_mirror_symmetries(dw):
    rng = np.random.default_rng(0)
    R = rng.uniform(-2, 2, size=(100, 2))
    e = dw.energy(R)
    for flip in ([-1, 1], [1, -1], [-1, -1]):
        assert np.max(np.abs(dw.energy(R * flip) - e)) < 1e-12


@pytest.mark.parametrize("name", ["double_well", "chain4"])
def test_force_matches_finite_differences(name):
    sys_ = systems.get_system(name)
    rng = np.random.default_rng(1)
    if name == "double_well":
        R = rng.uniform(-2, 2, size=(100, sys_.dim))
    else:
        R = sys_.R_A + rng.normal(scale=0.1, size=(100, sys_.dim))
    f = sys_.force(R)
    h = 1e-6
    for j in range(sys_.dim):
        e = np.zeros(sys_.dim)
        e[j] = h
        fd = (sys_.energy(R + e) - sys_.energy(R - e)) / (2 * h)
        denom = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(fd + f[:, j])) / denom < 1e-5


def test_force_antisymmetric_in_x(dw):
    rng = np.random.default_rng(2)
    R = rng.uniform(-2, 2, size=(50, 2))
    f = dw.force(R)
    f_flip = dw.force(R * [-1, 1])
    assert np.max(np.abs(f_flip[:, 0] + f[:, 0])) < 1e-12
    assert np.max(np.abs(f_flip[:, 1] - f[:, 1])) < 1e-12


def test_force_vanishes_at_minima(dw, dw_points):
    for cp in dw_points:
        if cp.kind == "minimum":
            assert np.linalg.norm(dw.force(cp.position)) < 1e-6


def test_critical_point_census(dw, dw_points):
    minima = [p for p in dw_points if p.kind == "minimum"]
    saddles = [p for p in dw_points if p.kind == "saddle"]
    assert len(minima) == 2
    assert len(saddles) == 2
    xs = sorted(p.position[0] for p in minima)
    assert xs[0] < 0 < xs[1]
    # mirror symmetry of the pair
    assert abs(xs[0] + xs[1]) < 1e-6
    ys = sorted(p.position[1] for p in saddles)
    assert ys[0] < 0 < ys[1]
    assert abs(ys[0] + ys[1]) < 1e-4
    # energies pair up by symmetry
    assert abs(minima[0].energy - minima[1].energy) < 1e-8
    assert abs(saddles[0].energy - saddles[1].energy) < 1e-8
    # gradient norm contract
    for cp in dw_points:
        assert np.linalg.norm(dw.gradient(cp.position)) < 1e-8


def test_endpoints_are_the_minima(dw, dw_points):
    minima = sorted((p for p in dw_points if p.kind == "minimum"),
                    key=lambda p: p.position[0])
    assert np.linalg.norm(dw.R_A - minima[0].position) < 1e-8
    assert np.linalg.norm(dw.R_B - minima[1].position) < 1e-8
    assert abs(np.linalg.norm(dw.R_A - dw.R_B) - 2.2360679) < 1e-4


def test_finder_idempotent(dw, dw_points):
    again = find_critical_points(dw)
    assert len(again) == len(dw_points)
    for a, b in zip(dw_points, again):
        assert np.linalg.norm(a.position - b.position) < 1e-8
        assert a.kind == b.kind


def test_in_target(dw, dw_points):
    assert bool(dw.in_target(dw.R_B))
    assert not bool(dw.in_target(dw.R_A))
    for cp in dw_points:
        if cp.kind == "saddle":
            assert not bool(dw.in_target(cp.position))
    # batched
    flags = dw.in_target(np.stack([dw.R_A, dw.R_B]))
    assert flags.tolist() == [False, True]


def test_chain4_endpoints_minimized(chain):
    for R in (chain.R_A, chain.R_B):
        assert np.linalg.norm(chain.gradient(R)) < 1e-6
        assert np.isfinite(chain.energy(R))
    # the two endpoints are distinct dihedral minima of equal energy
    assert abs(chain.energy(chain.R_A) - chain.energy(chain.R_B)) < 1e-8
    phi_a = systems.chain4_dihedral(chain.R_A)[0]
    phi_b = systems.chain4_dihedral(chain.R_B)[0]
    assert abs(phi_a + phi_b) < 1e-6
    assert abs(abs(phi_a) - systems.CHAIN4_DIHEDRAL_PHI0) < 1e-6


def test_chain4_equilibrium_is_global_floor(chain):
    # numerical-minimization oracle: relaxing perturbed geometries never
    # finds anything below the endpoint energy
    from scipy.optimize import minimize

    rng = np.random.default_rng(3)
    e0 = chain.energy(chain.R_A)
    for _ in range(5):
        x0 = chain.R_A + rng.normal(scale=0.2, size=12)
        res = minimize(lambda x: float(chain.energy(x)),
                       x0, jac=lambda x: -chain.force(x), method="BFGS",
                       options={"gtol": 1e-9, "maxiter": 300})
        assert res.fun >= e0 - 1e-9


def test_cv_separation_exceeds_two_radii(chain, dw):
    for sys_ in (chain, dw):
        sep = np.linalg.norm(sys_.cv(sys_.R_A) - sys_.cv(sys_.R_B))
        assert sep > 2 * sys_.target_radius


def test_eval_counter(dw):
    dw.counter.reset()
    R = np.zeros((7, 2))
    dw.energy(R)
    dw.force(R)
    dw.force(np.zeros(2))
    assert dw.counter.energy == 7
    assert dw.counter.force == 8
    dw.counter.reset()
    assert dw.counter.force == 0


def test_noise_scale(dw):
    sigma = dw.noise_scale(1200.0)
    expect = np.sqrt(2 * dw.gamma * dw.boltzmann * 1200.0 / dw.masses)
    assert np.allclose(sigma, expect)
    with pytest.raises(SystemError):
        dw.noise_scale(-1.0)


def test_dimension_checks(dw):
    with pytest.raises(SystemError):
        dw.energy(np.zeros(3))
    with pytest.raises(SystemError):
        systems.get_system("nope")


def test_construction_validation():
    import dataclasses

    dw = systems.make_double_well()
    with pytest.raises(SystemError):
        dataclasses.replace(dw, masses=np.array([1.0, -1.0]))
    with pytest.raises(SystemError):
        dataclasses.replace(dw, R_B=dw.R_A.copy())
    with pytest.raises(SystemError):
        dataclasses.replace(dw, target_radius=2.0)  # regions would overlap


def test_critical_point_type():
    cp = CriticalPoint(np.zeros(2), 1.0, "saddle")
    assert cp.kind == "saddle"
