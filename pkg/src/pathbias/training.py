"""The training loop: simulated-annealing rollouts feeding a replay buffer,
with Adam updates of the policy parameters and the control variate.

Each of the I rollouts generates M paths with the current policy at the
annealed temperature, pushes them into the buffer, then performs J update
steps, each on K paths sampled uniformly from the buffer.  The policy
gradient is clipped to unit global norm; the scalar w follows its own
(larger) learning rate.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, objective, policy
from .geometry import aligned_rmsd
from .seeding import derive_seed, substream
from .systems import SystemSpec, get_system


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Run hyperparameters.  Defaults reproduce the double-well benchmark.

    ``n_updates`` (J) trades training compute against convergence; the
    benchmark numbers are reached on a single CPU core with the default.
    """

    system: str = "double_well"
    mode: str = "F"
    n_rollouts: int = 20           # I
    n_samples: int = 512           # M paths per rollout
    batch_size: int = 512          # K paths per update
    n_updates: int = 100           # J updates per rollout
    buffer_capacity: int = 10000
    temp_start: float = 2400.0
    temp_end: float = 1200.0
    lr_policy: float = 1e-4
    lr_w: float = 1e-3
    grad_clip: float = 1.0
    indicator_kind: str = "rbf_max"
    indicator_sigma: float = 3.0
    hidden_width: int = 64
    n_hidden: int = 3
    seed: int = 0
    n_steps: int | None = None     # horizon override (L)
    objective_kind: str = "logvar"  # "logvar" | "kl"
    control: str = "learned"       # "learned" | "local"
    use_replay: bool = True
    use_alignment: bool = True
    init_velocity: str = "zero"

    def __post_init__(self):
        if min(self.n_rollouts, self.n_samples, self.batch_size) < 1 or self.n_updates < 0:
            raise ValueError("I, M, K must be >= 1 and J >= 0")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch size exceeds buffer capacity")
        if not (self.temp_start >= self.temp_end > 0):
            raise ValueError("need temp_start >= temp_end > 0")
        if self.mode not in policy.MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.objective_kind not in ("logvar", "kl"):
            raise ValueError(f"unknown objective {self.objective_kind!r}")

    def indicator_spec(self) -> objective.IndicatorSpec:
        return objective.IndicatorSpec(self.indicator_kind, self.indicator_sigma)

    def effective_control(self) -> str:
        # The KL-divergence objective is the on-policy sample-variance form.
        return "local" if self.objective_kind == "kl" else self.control

    def effective_replay(self) -> bool:
        return False if self.objective_kind == "kl" else self.use_replay


@dataclass
class TrainLog:
    """One record per rollout; written as CSV without the wall-time column
    (artifacts must be bit-identical across reruns)."""

    records: list = field(default_factory=list)

    CSV_FIELDS = ("rollout", "temperature", "loss_mean", "residual_variance",
                  "w", "hit_fraction", "mean_final_rmsd", "mean_trunc_index",
                  "n_updates")

    def add(self, **kwargs) -> None:
        self.records.append(kwargs)

    def to_csv(self, fh) -> None:
        fh.write(",".join(self.CSV_FIELDS) + "\n")
        for rec in self.records:
            fh.write(",".join(repr(rec[k]) if isinstance(rec[k], float)
                              else str(rec[k]) for k in self.CSV_FIELDS) + "\n")

    def column(self, name: str) -> np.ndarray:
        return np.array([rec[name] for rec in self.records])


def anneal(i: int, cfg: TrainConfig) -> float:
    """Linear schedule from temp_start (i=1) to temp_end (i=I)."""
    if not 1 <= i <= cfg.n_rollouts:
        raise ValueError(f"rollout index {i} outside 1..{cfg.n_rollouts}")
    if cfg.n_rollouts == 1:
        return cfg.temp_end
    frac = (i - 1) / (cfg.n_rollouts - 1)
    return cfg.temp_start + frac * (cfg.temp_end - cfg.temp_start)


class Adam:
    """Adam with bias correction; one instance per parameter group."""

    def __init__(self, shapes, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, grads: list) -> list:
        self.step_count += 1
        t = self.step_count
        updates = []
        for i, g in enumerate(grads):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / (1 - self.beta1 ** t)
            vhat = self.v[i] / (1 - self.beta2 ** t)
            updates.append(-self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return updates


def clip_global_norm(grads: list, max_norm: float) -> tuple:
    """Scale the gradient list so its global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


def _mean_final_rmsd(system: SystemSpec, paths: list) -> float:
    finals = np.stack([p.final_position() for p in paths])
    if not system.use_alignment:
        return float(np.mean(np.linalg.norm(finals - system.R_B, axis=1)))
    N, d = system.n_atoms, system.spatial_dim
    target = system.R_B.reshape(N, d)
    return float(np.mean([aligned_rmsd(f.reshape(N, d), target) for f in finals]))


def make_system(cfg: TrainConfig) -> SystemSpec:
    kwargs = {"temperature": cfg.temp_end}
    if cfg.n_steps is not None:
        kwargs["n_steps"] = cfg.n_steps
    system = get_system(cfg.system, **kwargs)
    if not cfg.use_alignment and system.use_alignment:
        system = dataclasses.replace(system, use_alignment=False)
    return system


def train(cfg: TrainConfig, system: SystemSpec | None = None,
          checkpoint_dir: str | None = None, config_hash: str = "",
          resume_state: dict | None = None, progress=None,
          stop_after: int | None = None) -> tuple:
    """Run the full loop; returns (PolicyParams, TrainLog, ReplayBuffer).

    Fully reproducible from cfg.seed: rollouts draw from per-path Philox
    streams keyed by a rollout-specific derived seed, buffer sampling from
    per-update substreams, and updates are single-threaded with fixed
    reduction order.  ``stop_after`` ends the loop early without changing
    the schedule (an interrupted run to be resumed later).  Aborts with
    TrainingDiverged after 3 consecutive non-finite losses.
    """
    if system is None:
        system = make_system(cfg)
    spec = cfg.indicator_spec()
    control = cfg.effective_control()
    capacity = cfg.buffer_capacity if cfg.effective_replay() else cfg.n_samples

    if resume_state is None:
        params = policy.init_params(system, cfg.mode, cfg.hidden_width,
                                    cfg.n_hidden, seed=derive_seed(cfg.seed, "init"))
        buffer = objective.ReplayBuffer(capacity, spec, system)
        shapes = [p.shape for p in params.flat_parameters()]
        opt_theta = Adam(shapes, cfg.lr_policy)
        opt_w = Adam([()], cfg.lr_w)
        start_rollout = 1
        log = TrainLog()
    else:
        params = resume_state["params"]
        buffer = resume_state["buffer"]
        opt_theta = resume_state["opt_theta"]
        opt_w = resume_state["opt_w"]
        start_rollout = resume_state["rollout"] + 1
        log = resume_state.get("log", TrainLog())

    last = cfg.n_rollouts if stop_after is None else min(stop_after, cfg.n_rollouts)
    for i in range(start_rollout, last + 1):
        t0 = time.monotonic()
        temp_i = anneal(i, cfg)
        snapshot = params.copy()
        paths = dynamics.rollout_ensemble(
            system, policy.NeuralPolicy(system, snapshot), cfg.n_samples,
            temperature=temp_i, seed=derive_seed(cfg.seed, "rollout", i),
            init_velocity=cfg.init_velocity)
        if not cfg.effective_replay():
            buffer = objective.ReplayBuffer(capacity, spec, system)
        buffer.push(paths)

        hits = system.in_target(np.stack([p.final_position() for p in paths]))
        hit_fraction = float(np.mean(hits))
        rmsd = _mean_final_rmsd(system, paths)

        losses = []
        bad_streak = 0
        for j in range(cfg.n_updates):
            # stateless per-(rollout, update) stream: resume-safe
            rng_buffer = substream(cfg.seed, "buffer-sample", i, j)
            k = min(cfg.batch_size, len(buffer))
            batch = buffer.sample(k, rng_buffer)
            try:
                value, grads, w_grad = objective.loss_and_grads(
                    system, params, batch, spec, control=control)
            except objective.ObjectiveError:
                bad_streak += 1
                if bad_streak >= 3:
                    raise TrainingDiverged(
                        f"loss non-finite for {bad_streak} consecutive updates "
                        f"(rollout {i})")
                continue
            bad_streak = 0
            losses.append(value.loss)

            grads, _norm = clip_global_norm(grads, cfg.grad_clip)
            updates = opt_theta.step(grads)
            for p_arr, u in zip(params.flat_parameters(), updates):
                p_arr += u
            if control == "learned":
                wg = float(np.clip(w_grad, -cfg.grad_clip, cfg.grad_clip))
                params.w += opt_w.step([np.asarray(wg)])[0].item()
            params.check_finite()

        trunc = [p.trunc_index for p in paths]
        log.add(rollout=i, temperature=temp_i,
                loss_mean=float(np.mean(losses)) if losses else float("nan"),
                residual_variance=float(np.var(value.residuals)) if losses else float("nan"),
                w=params.w, hit_fraction=hit_fraction, mean_final_rmsd=rmsd,
                mean_trunc_index=float(np.mean(trunc)),
                n_updates=len(losses), wall_time=time.monotonic() - t0)
        if progress is not None:
            progress(i, log.records[-1])
        if checkpoint_dir is not None:
            _save_rollout_checkpoint(checkpoint_dir, cfg, config_hash, i,
                                     params, opt_theta, opt_w)

    return params, log, buffer


def _save_rollout_checkpoint(checkpoint_dir, cfg, config_hash, rollout,
                             params, opt_theta, opt_w):
    import os

    os.makedirs(checkpoint_dir, exist_ok=True)
    opt_state = {
        "step": opt_theta.step_count,
        "w_m": float(opt_w.m[0]), "w_v": float(opt_w.v[0]),
        "m": opt_theta.m, "v": opt_theta.v,
    }
    meta = {"seed": cfg.seed, "rollout": rollout, "config_hash": config_hash,
            "mode": cfg.mode, "system": cfg.system}
    policy.save_checkpoint(
        os.path.join(checkpoint_dir, f"rollout_{rollout:04d}.ckpt"),
        params, meta, opt_state)
    policy.save_checkpoint(
        os.path.join(checkpoint_dir, "latest.ckpt"), params, meta, opt_state)


ABLATION_TOGGLES = ("kl_loss", "local_control_variate", "no_replay",
                    "no_annealing", "final_state_only", "no_equivariance")


def ablation_toggles(cfg: TrainConfig, names=None) -> dict:
    """Named config variants for the component ablations."""
    variants = {}
    for name in (names or ABLATION_TOGGLES):
        if name == "kl_loss":
            variants[name] = dataclasses.replace(cfg, objective_kind="kl")
        elif name == "local_control_variate":
            variants[name] = dataclasses.replace(cfg, control="local")
        elif name == "no_replay":
            variants[name] = dataclasses.replace(cfg, use_replay=False)
        elif name == "no_annealing":
            variants[name] = dataclasses.replace(cfg, temp_start=cfg.temp_end)
        elif name == "final_state_only":
            variants[name] = dataclasses.replace(cfg, indicator_kind="rbf_final")
        elif name == "no_equivariance":
            variants[name] = dataclasses.replace(cfg, use_alignment=False)
        else:
            raise ValueError(f"unknown ablation toggle {name!r}")
    return variants
