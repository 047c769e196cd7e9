"""Metrics (RMSD / THP / ETS), transition-state extraction, the
rejection-sampling ground-truth ensemble, and report generation.

Definitions:
* RMSD: aligned distance of a path's final position to R_B (plain Euclidean
  for planar systems).
* THP: percentage of paths whose final position lies in the hard target set.
* ETS: maximum potential energy among states up to the *first* entry into
  the target set; the argmax state is the transition state.  Scanning stops
  at first entry so post-arrival excursions do not count.

The rejection oracle runs unbiased dynamics at the base temperature and
keeps paths that end in the target set.  It scans lean state arrays and
then re-rolls only the accepted (seed, path_id) pairs into full Path
objects, which is exact because every path owns its own noise stream.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import wasserstein_distance

from .dynamics import Path, ZeroBias, rollout_ensemble
from .geometry import aligned_rmsd
from .systems import SystemSpec

REPORT_VERSION = 1
HISTOGRAM_BINS = 50


class EvaluationError(ValueError):
    pass


def rmsd_metric(system: SystemSpec, path: Path) -> float:
    """Aligned RMSD of the final position to the target position."""
    final = path.final_position()
    if not system.use_alignment:
        return float(np.linalg.norm(final - system.R_B) / np.sqrt(system.n_atoms))
    N, d = system.n_atoms, system.spatial_dim
    return aligned_rmsd(final.reshape(N, d), system.R_B.reshape(N, d))


def thp_metric(system: SystemSpec, ensemble: list) -> float:
    """Percent of paths whose final state is in the hard target set."""
    if not ensemble:
        raise EvaluationError("empty ensemble")
    finals = np.stack([p.final_position() for p in ensemble])
    return float(100.0 * np.mean(system.in_target(finals)))


def first_hit_index(system: SystemSpec, path: Path) -> int | None:
    hits = system.in_target(path.positions)
    if not np.any(hits):
        return None
    return int(np.argmax(hits))


def channel_coordinate(system: SystemSpec, position: np.ndarray) -> float:
    """Scalar separating the reaction channels (y for the double well)."""
    cvv = system.cv(position)
    return float(cvv[1] if cvv.shape[-1] >= 2 else cvv[0])


def ets_metric(system: SystemSpec, path: Path, scan: str = "to_first_hit") -> tuple:
    """(max energy, transition state, state index) for a hitting path.

    ``scan`` may be "to_first_hit" (default) or "full" to include states
    after arrival.
    """
    hit = first_hit_index(system, path)
    if hit is None:
        raise EvaluationError("ETS is only defined for paths that hit the target")
    stop = hit + 1 if scan == "to_first_hit" else path.length + 1
    energies = system.energy(path.positions[:stop])
    idx = int(np.argmax(energies))
    return float(energies[idx]), path.positions[idx].copy(), idx


@dataclass
class RunReport:
    """Ensemble metrics plus histogram payloads, serializable to JSON/CSV."""

    system: str
    n_paths: int
    rmsd: list
    thp: float
    ets: list
    transition_states: list        # dicts: position, energy, channel
    rmsd_mean: float
    rmsd_std: float
    ets_mean: float | None
    ets_std: float | None
    energy_histogram: dict = field(default_factory=dict)
    channel_histogram: dict = field(default_factory=dict)
    seed: int | None = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "system": self.system,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "thp_percent": self.thp,
            "rmsd_mean": self.rmsd_mean,
            "rmsd_std": self.rmsd_std,
            "ets_mean": self.ets_mean,
            "ets_std": self.ets_std,
            "rmsd": self.rmsd,
            "ets": self.ets,
            "transition_states": self.transition_states,
            "energy_histogram": self.energy_histogram,
            "channel_histogram": self.channel_histogram,
            "extra": self.extra,
        }

    def save(self, out_dir: str, prefix: str = "report") -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{prefix}.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name, hist in (("energy", self.energy_histogram),
                           ("channel", self.channel_histogram)):
            if not hist:
                continue
            with open(os.path.join(out_dir, f"{prefix}_{name}_hist.csv"), "w") as fh:
                fh.write("bin_left,bin_right,count\n")
                for lo, hi, c in zip(hist["bin_left"], hist["bin_right"], hist["count"]):
                    fh.write(f"{lo!r},{hi!r},{c}\n")


def _histogram(values: np.ndarray) -> dict:
    if values.size == 0:
        return {}
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS)
    return {"bin_left": [float(e) for e in edges[:-1]],
            "bin_right": [float(e) for e in edges[1:]],
            "count": [int(c) for c in counts]}


def report(system: SystemSpec, ensemble: list, seed: int | None = None,
           config_hash: str = "", extra: dict | None = None) -> RunReport:
    """All metrics for an ensemble, including transition-state histograms."""
    if not ensemble:
        raise EvaluationError("empty ensemble")
    rmsds = [rmsd_metric(system, p) for p in ensemble]
    finals = np.stack([p.final_position() for p in ensemble])
    hits = system.in_target(finals)
    thp = float(100.0 * np.mean(hits))
    ets_vals, ts_records = [], []
    for p, hit in zip(ensemble, hits):
        if not hit:
            continue
        energy, state, idx = ets_metric(system, p)
        ets_vals.append(energy)
        ts_records.append({
            "position": [float(x) for x in state],
            "energy": energy,
            "channel": channel_coordinate(system, state),
            "state_index": idx,
        })
    ets_arr = np.array(ets_vals)
    chan_arr = np.array([r["channel"] for r in ts_records])
    return RunReport(
        system=system.name, n_paths=len(ensemble),
        rmsd=[float(v) for v in rmsds], thp=thp,
        ets=[float(v) for v in ets_vals],
        transition_states=ts_records,
        rmsd_mean=float(np.mean(rmsds)), rmsd_std=float(np.std(rmsds)),
        ets_mean=float(np.mean(ets_arr)) if ets_arr.size else None,
        ets_std=float(np.std(ets_arr)) if ets_arr.size else None,
        energy_histogram=_histogram(ets_arr),
        channel_histogram=_histogram(chan_arr),
        seed=seed, config_hash=config_hash, extra=dict(extra or {}),
    )


def rejection_oracle(system: SystemSpec, proposal_budget: int, seed: int = 0,
                     chunk: int = 8192) -> tuple:
    """Ground-truth transition ensemble by accept/reject on unbiased paths.

    Returns (accepted paths, acceptance_rate, n_proposed).  Scans cheap
    state arrays chunk by chunk, then reconstructs accepted paths exactly
    from their per-path noise streams.  Raises if nothing is accepted,
    reporting the implied rate bound.
    """
    if proposal_budget < 1:
        raise EvaluationError("budget must be >= 1")
    L = system.n_steps
    sigma = system.noise_scale(system.base_temperature)
    sqdt = np.sqrt(system.dt)
    accepted_ids = []
    done = 0
    while done < proposal_budget:
        m = min(chunk, proposal_budget - done)
        ids = np.arange(done, done + m)
        noise = np.empty((m, L, system.dim))
        for j, i in enumerate(ids):
            rng = np.random.Generator(np.random.Philox(
                key=np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(i)],
                             dtype=np.uint64)))
            noise[j] = rng.standard_normal((L, system.dim))
        R = np.tile(system.R_A, (m, 1))
        V = np.zeros_like(R) if system.mode == "underdamped" else None
        for ell in range(L):
            force = system.force(R)
            if system.mode == "overdamped":
                R = R + force / system.masses * system.dt + sigma * sqdt * noise[:, ell]
            else:
                R = R + V * system.dt
                V = V + (force / system.masses - system.gamma * V) * system.dt \
                    + sigma * sqdt * noise[:, ell]
        hits = system.in_target(R)
        accepted_ids.extend(int(i) for i in ids[hits])
        done += m
    rate = len(accepted_ids) / proposal_budget
    if not accepted_ids:
        raise EvaluationError(
            f"no acceptances in {proposal_budget} proposals "
            f"(rate < {3.0 / proposal_budget:.2e} at 95%)")
    paths = []
    for pid in accepted_ids:
        paths.extend(rollout_ensemble(system, ZeroBias(), 1,
                                      temperature=system.base_temperature,
                                      seed=seed, first_path_id=pid))
    return paths, rate, proposal_budget


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """Earth-mover distance between two 1-D samples."""
    return float(wasserstein_distance(np.asarray(a, float), np.asarray(b, float)))
