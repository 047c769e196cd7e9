"""Metrics, transition states, the rejection oracle, and reports."""

import json

import numpy as np
import pytest

from pathbias import evaluation, geometry, systems
from pathbias.dynamics import Path, ZeroBias, rollout_ensemble
from pathbias.evaluation import (EvaluationError, ets_metric, first_hit_index,
                                 rejection_oracle, report, rmsd_metric,
                                 thp_metric, wasserstein1)


@pytest.fixture(scope="module")
def dw():
    return systems.make_double_well()


@pytest.fixture(scope="module")
def chain():
    return systems.make_chain4()


def make_path(dw, states):
    states = np.asarray(states, dtype=np.float64)
    L = len(states) - 1
    return Path(positions=states, velocities=None,
                noises=np.zeros((L, states.shape[1])),
                policy_values=np.zeros((L, states.shape[1])),
                gen_temperature=dw.base_temperature)


def test_rmsd_endpoints(dw):
    p = make_path(dw, [dw.R_A, dw.R_B])
    assert rmsd_metric(dw, p) == 0.0
    q = make_path(dw, [dw.R_A, dw.R_A])
    assert abs(rmsd_metric(dw, q) - np.linalg.norm(dw.R_A - dw.R_B)) < 1e-12


def test_rmsd_rigid_invariance_chain4(chain):
    rng = np.random.default_rng(0)
    final = chain.R_A + rng.normal(scale=0.1, size=12)
    base = Path(positions=np.stack([chain.R_A, final]),
                velocities=np.zeros((2, 12)), noises=np.zeros((1, 12)),
                policy_values=np.zeros((1, 12)), gen_temperature=1200.0)
    v0 = rmsd_metric(chain, base)
    for _ in range(5):
        g = geometry.random_rigid(rng, 3)
        moved = g.apply(final.reshape(4, 3)).reshape(12)
        p = Path(positions=np.stack([chain.R_A, moved]),
                 velocities=np.zeros((2, 12)), noises=np.zeros((1, 12)),
                 policy_values=np.zeros((1, 12)), gen_temperature=1200.0)
        assert abs(rmsd_metric(chain, p) - v0) < 1e-9


def test_thp_extremes(dw):
    hit = make_path(dw, [dw.R_A, dw.R_B])
    miss = make_path(dw, [dw.R_A, dw.R_A])
    assert thp_metric(dw, [hit, hit]) == 100.0
    assert thp_metric(dw, [miss, miss]) == 0.0
    assert thp_metric(dw, [hit, miss]) == 50.0


def test_ets_monotone_three_state_path(dw):
    saddleish = np.array([0.0, 1.0])
    p = make_path(dw, [dw.R_A, saddleish, dw.R_B])
    energy, state, idx = ets_metric(dw, p)
    assert abs(energy - dw.energy(saddleish)) < 1e-12
    assert idx == 1
    assert np.array_equal(state, saddleish)


def test_ets_requires_hit(dw):
    p = make_path(dw, [dw.R_A, dw.R_A])
    with pytest.raises(EvaluationError):
        ets_metric(dw, p)


def test_ets_ignores_post_hit_excursions(dw):
    tall = np.array([0.0, 0.0])  # energy 2.0, higher than the channel
    base = make_path(dw, [dw.R_A, np.array([0.0, 1.0]), dw.R_B])
    detour = make_path(dw, [dw.R_A, np.array([0.0, 1.0]), dw.R_B, tall, dw.R_B])
    assert ets_metric(dw, base)[0] == ets_metric(dw, detour)[0]
    # the full-scan switch does see the excursion
    assert ets_metric(dw, detour, scan="full")[0] == 2.0


def test_first_hit_index(dw):
    p = make_path(dw, [dw.R_A, dw.R_B, dw.R_A])
    assert first_hit_index(dw, p) == 1
    q = make_path(dw, [dw.R_A, dw.R_A])
    assert first_hit_index(dw, q) is None


def test_report_degenerate_single_path(dw, tmp_path):
    p = make_path(dw, [dw.R_A, np.array([0.0, 1.0]), dw.R_B])
    rep = report(dw, [p], seed=1, config_hash="abc")
    assert rep.thp == 100.0
    assert rep.rmsd_mean == 0.0
    assert rep.ets_mean == pytest.approx(1.0)
    assert len(rep.transition_states) == 1
    rep.save(str(tmp_path))
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["version"] == evaluation.REPORT_VERSION
    assert data["config_hash"] == "abc"
    assert (tmp_path / "report_energy_hist.csv").exists()


def test_report_histograms_sum_to_counts(dw):
    rng = np.random.default_rng(1)
    paths = []
    for _ in range(20):
        mid = np.array([rng.uniform(-0.2, 0.2), rng.choice([-1.0, 1.0])])
        paths.append(make_path(dw, [dw.R_A, mid, dw.R_B]))
    for _ in range(10):
        paths.append(make_path(dw, [dw.R_A, dw.R_A]))
    rep = report(dw, paths)
    n_hits = 20
    assert sum(rep.energy_histogram["count"]) == n_hits
    assert sum(rep.channel_histogram["count"]) == n_hits
    assert len(rep.transition_states) == n_hits
    assert rep.thp == pytest.approx(100.0 * 20 / 30)


def test_report_permutation_invariant(dw):
    rng = np.random.default_rng(2)
    paths = [make_path(dw, [dw.R_A, np.array([0.0, 1.0]),
                            dw.R_B + rng.normal(scale=0.05, size=2)])
             for _ in range(10)]
    a = report(dw, paths)
    b = report(dw, paths[::-1])
    assert a.thp == b.thp
    assert a.rmsd_mean == pytest.approx(b.rmsd_mean)
    assert a.ets_mean == pytest.approx(b.ets_mean)


def test_rejection_oracle_accepts_only_hits():
    hot = systems.make_double_well(temperature=4800.0)
    accepted, rate, budget = rejection_oracle(hot, 300, seed=4)
    assert budget == 300
    assert 0 < rate <= 1
    assert len(accepted) == round(rate * budget)
    for p in accepted:
        assert bool(hot.in_target(p.final_position()))


def test_rejection_oracle_matches_rollout_streams():
    hot = systems.make_double_well(temperature=4800.0)
    accepted, _, _ = rejection_oracle(hot, 120, seed=9)
    direct = rollout_ensemble(hot, ZeroBias(), 120, seed=9)
    finals = {i: p for i, p in enumerate(direct) if hot.in_target(p.final_position())}
    assert len(finals) == len(accepted)
    for p, (i, q) in zip(accepted, sorted(finals.items())):
        assert np.array_equal(p.positions, q.positions)


def test_rejection_oracle_zero_acceptance_reports_bound():
    dw = systems.make_double_well()
    with pytest.raises(EvaluationError, match="rate <"):
        rejection_oracle(dw, 30, seed=0)


def test_wasserstein_sanity():
    rng = np.random.default_rng(5)
    a = rng.normal(size=500)
    assert wasserstein1(a, a) == 0.0
    assert abs(wasserstein1(a, a + 2.0) - 2.0) < 1e-12
