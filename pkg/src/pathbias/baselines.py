"""Unbiased MD (UMD) and steered MD (SMD) baselines.

SMD adds a moving harmonic restraint k * ||R - target(t)||^2 (force
-2k (R - target)).  The target moves at constant velocity from R_A to R_B
over the first ``pull_fraction`` of the horizon and then holds at R_B,
which is what lets moderate force constants actually arrive: a restraint
still in transit at the final step leaves every path one lag-length short.
Baselines are evaluation-only; their paths never enter training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Path, ZeroBias, rollout_ensemble
from .systems import SystemSpec


@dataclass(frozen=True)
class SmdSchedule:
    """Moving-restraint schedule: stiffness and pulling time fraction."""

    force_constant: float
    pull_fraction: float = 0.3

    def __post_init__(self):
        if self.force_constant < 0:
            raise ValueError("force constant must be >= 0")
        if not 0 < self.pull_fraction <= 1:
            raise ValueError("pull fraction must be in (0, 1]")


class SmdController:
    """Restraint force -2k (R - target(step)); reduces to UMD at k = 0."""

    def __init__(self, system: SystemSpec, schedule: SmdSchedule, n_steps: int):
        self.schedule = schedule
        self.n_steps = n_steps
        self.start = system.R_A
        self.delta = system.R_B - system.R_A

    def target(self, step_index: int) -> np.ndarray:
        pull_steps = max(1, int(round(self.schedule.pull_fraction * self.n_steps)))
        s = min(1.0, step_index / pull_steps)
        return self.start + s * self.delta

    def bias(self, system: SystemSpec, R: np.ndarray, step_index: int) -> np.ndarray:
        if self.schedule.force_constant == 0.0:
            return np.zeros_like(R)
        return -2.0 * self.schedule.force_constant * (R - self.target(step_index))


def run_umd(system: SystemSpec, temperature: float, n_paths: int,
            seed: int = 0) -> list:
    """Zero-policy rollouts at the given temperature."""
    return rollout_ensemble(system, ZeroBias(), n_paths,
                            temperature=temperature, seed=seed)


def run_smd(system: SystemSpec, schedule: SmdSchedule, temperature: float,
            n_paths: int, seed: int = 0) -> list:
    """Steered rollouts under the moving restraint."""
    L = system.n_steps
    controller = SmdController(system, schedule, L)
    return rollout_ensemble(system, controller, n_paths,
                            temperature=temperature, seed=seed)
