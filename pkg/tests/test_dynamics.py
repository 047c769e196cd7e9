"""Integrator correctness: drifts, noise statistics, reproducibility,
round-trip noise reconstruction, and path serialization."""

import io

import numpy as np
import pytest

from pathbias import dynamics, systems
from pathbias.dynamics import MDState, Path, ZeroBias, rollout, rollout_ensemble


def flat_system(dim=2, mode="overdamped", boltzmann=8.5e-5, temperature=1200.0):
    """Zero-potential system for noise statistics."""
    return systems.SystemSpec(
        name="flat", n_atoms=1, spatial_dim=dim, masses=np.ones(dim),
        gamma=1.0, boltzmann=boltzmann, base_temperature=temperature,
        dt=0.01, n_steps=100, mode=mode, target_radius=0.5,
        use_alignment=False,
        R_A=np.zeros(dim), R_B=np.full(dim, 10.0),
        _energy_fn=lambda R: np.zeros(R.shape[0]),
        _force_fn=lambda R: np.zeros_like(R),
        _cv_fn=lambda R: R.copy(),
    )


def quadratic_system(k=1.0, boltzmann=8.5e-5, temperature=1200.0):
    """1-D harmonic well U = k x^2 / 2 (as a 2-atom-free 1-D system)."""
    return systems.SystemSpec(
        name="harmonic", n_atoms=1, spatial_dim=1, masses=np.ones(1),
        gamma=1.0, boltzmann=boltzmann, base_temperature=temperature,
        dt=0.01, n_steps=100, mode="overdamped", target_radius=0.5,
        use_alignment=False,
        R_A=np.zeros(1), R_B=np.full(1, 10.0),
        _energy_fn=lambda R: 0.5 * k * R[:, 0] ** 2,
        _force_fn=lambda R: -k * R,
        _cv_fn=lambda R: R.copy(),
    )


@pytest.fixture(scope="module")
def dw():
    return systems.make_double_well()


@pytest.fixture(scope="module")
def chain():
    return systems.make_chain4()


def test_drift_zero_bias_reduces_to_unbiased(dw):
    rng = np.random.default_rng(0)
    R = rng.uniform(-1, 1, size=(6, 2))
    state = MDState(R, None, 0)
    pos_drift, vel_drift = dynamics.drift(dw, state, np.zeros_like(R))
    assert vel_drift is None
    assert np.allclose(pos_drift, dw.force(R) / dw.masses)


def test_drift_constant_bias_flat_potential():
    sys_ = flat_system()
    state = MDState(np.zeros((1, 2)), None, 0)
    pos_drift, _ = dynamics.drift(sys_, state, np.array([[1.0, 0.0]]))
    assert np.allclose(pos_drift, [[1.0, 0.0]])


def test_underdamped_velocity_drift_matches_force(chain):
    rng = np.random.default_rng(1)
    R = chain.R_A + rng.normal(scale=0.05, size=(4, 12))
    V = np.zeros_like(R)
    state = MDState(R, V, 0)
    pos_drift, vel_drift = dynamics.drift(chain, state, np.zeros_like(R))
    assert np.allclose(pos_drift, V)
    assert np.allclose(vel_drift, chain.force(R) / chain.masses)


def test_noise_free_step_is_gradient_step(dw):
    rng = np.random.default_rng(2)
    R = rng.uniform(-1, 1, size=(5, 2))
    state = MDState(R, None, 0)
    new = dynamics.step(dw, state, np.zeros_like(R), 1200.0, np.zeros_like(R))
    assert np.allclose(new.R, R + dw.force(R) * dw.dt)  # m = gamma = 1
    assert new.t_index == 1


def test_step_increment_variance_flat_potential():
    # var(dx) = 2 gamma k_B T dt / m within 3 standard errors over 1e5 draws
    sys_ = flat_system()
    n = 100_000
    paths = rollout_ensemble(sys_, ZeroBias(), 4, seed=0, n_steps=n // 4)
    incs = np.concatenate([np.diff(p.positions, axis=0) for p in paths])
    var = incs.var(axis=0)
    expect = 2 * sys_.gamma * sys_.boltzmann * sys_.base_temperature * sys_.dt
    se = expect * np.sqrt(2.0 / incs.shape[0])
    assert np.all(np.abs(var - expect) < 3 * se)


def test_harmonic_equilibrium_variance():
    # Boltzmann consistency: stationary var = k_B T / k within 3 SE.
    sys_ = quadratic_system(k=1.0)
    n_chains, burn, total = 4000, 800, 1100
    paths = rollout_ensemble(sys_, ZeroBias(), n_chains, seed=3, n_steps=total)
    # thin samples separated by ~3 relaxation times; chains are independent
    samples = np.concatenate(
        [p.positions[burn::300, 0] for p in paths])
    expect = sys_.boltzmann * sys_.base_temperature / 1.0
    var = samples.var()
    se = expect * np.sqrt(2.0 / samples.size)
    # allow the O(dt) Euler-Maruyama bias on top of sampling error
    discretization_bias = expect * sys_.dt / 2
    assert abs(var - expect) < 3 * se + discretization_bias


def test_round_trip_noise_reconstruction(dw, chain):
    for sys_ in (dw, chain):
        p = rollout(sys_, ZeroBias(), seed=7, n_steps=30)
        p.validate(sys_)
        recon = dynamics.reconstruct_noises(sys_, p)
        assert np.max(np.abs(recon - p.noises)) < 1e-10


def test_same_seed_bit_identical(dw):
    a = rollout(dw, ZeroBias(), seed=11, n_steps=50)
    b = rollout(dw, ZeroBias(), seed=11, n_steps=50)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.noises, b.noises)


def test_ensemble_member_equals_single_rollout(dw):
    ens = rollout_ensemble(dw, ZeroBias(), 5, seed=13, n_steps=40)
    solo = rollout(dw, ZeroBias(), seed=13, n_steps=40, path_id=3)
    assert np.array_equal(ens[3].positions, solo.positions)
    assert np.array_equal(ens[3].noises, solo.noises)


def test_distinct_seeds_differ(dw):
    a = rollout(dw, ZeroBias(), seed=1, n_steps=20)
    b = rollout(dw, ZeroBias(), seed=2, n_steps=20)
    assert not np.array_equal(a.noises, b.noises)


def test_rollout_starts_at_R_A_with_zero_velocity(chain):
    p = rollout(chain, ZeroBias(), seed=0, n_steps=10)
    assert np.array_equal(p.positions[0], chain.R_A)
    assert np.array_equal(p.velocities[0], np.zeros(chain.dim))


def test_non_finite_state_reports_step_index():
    # finite inputs whose accumulation overflows: the step guard must fire
    # and name the step
    class HugeBias:
        def bias(self, system, R, step_index):
            return np.full_like(R, 1.7e308)

    sys_ = flat_system()
    with np.errstate(over="ignore"):
        with pytest.raises(dynamics.DynamicsError, match="step"):
            rollout(sys_, HugeBias(), seed=0, n_steps=200)


def test_binary_round_trip(dw, chain):
    for sys_ in (dw, chain):
        p = rollout(sys_, ZeroBias(), seed=5, n_steps=12)
        buf = io.BytesIO()
        dynamics.write_path_binary(buf, p)
        buf.seek(0)
        q = dynamics.read_path_binary(buf)
        assert np.array_equal(p.positions, q.positions)
        assert np.array_equal(p.noises, q.noises)
        assert np.array_equal(p.policy_values, q.policy_values)
        assert p.gen_temperature == q.gen_temperature
        if p.velocities is None:
            assert q.velocities is None
        else:
            assert np.array_equal(p.velocities, q.velocities)


def test_bad_magic_rejected():
    buf = io.BytesIO(b"NOTAPATH" + b"\x00" * 64)
    with pytest.raises(dynamics.DynamicsError, match="magic"):
        dynamics.read_path_binary(buf)


def test_csv_export(dw):
    p = rollout(dw, ZeroBias(), seed=5, n_steps=8)
    out = io.StringIO()
    dynamics.path_to_csv(out, dw, p)
    lines = out.getvalue().strip().split("\n")
    assert lines[0] == "step,x0,x1,energy"
    assert len(lines) == p.length + 2
    first = lines[1].split(",")
    assert first[0] == "0"
    assert abs(float(first[3]) - float(dw.energy(dw.R_A))) < 1e-12


def test_validate_catches_tampering(dw):
    p = rollout(dw, ZeroBias(), seed=5, n_steps=10)
    p.positions[4] += 0.01
    with pytest.raises(dynamics.DynamicsError, match="round-trip"):
        p.validate(dw)
