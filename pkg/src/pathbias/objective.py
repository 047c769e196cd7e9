"""Indicator relaxations, path log-densities, the divergence value, the
squared training loss with its control variate, and the replay buffer.

The scalar attached to each stored path is

    Fhat = sum_l [ 1/2 ||v(x_l)||^2 dt - v.vbar dt - sqrt(dt) v.eps_l ]
           + log indicator,

which equals ``log p0 + log indicator - log p_v`` exactly for the
Euler-Maruyama transition kernels, with all densities evaluated at the
system's *base* temperature.  Paths generated at an annealed temperature
enter through the rescaling r = sqrt(T_gen / T_base): both the stored
standardized noises and the stored generating controls pick up a factor r
when re-expressed in base-temperature units.  The training loss is the
batch mean of ``(Fhat - w)^2`` where w is a learned scalar whose optimum is
the batch-mean log ratio.

Everything heavy is batched: one tape evaluates all sampled states of a
batch of paths at once, and per-path sums are segment reductions.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import Path, read_path_binary, write_path_binary
from .policy import PolicyParams, bias_force, params_to_tape, policy_values_tape, target_frames
from .systems import SystemSpec

HARD_REJECT_LOG = -1.0e6  # sentinel for log 0 so rejected paths keep gradients

INDICATOR_KINDS = ("hard", "rbf_final", "rbf_max")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class IndicatorSpec:
    """Target-arrival indicator: hard set membership or an RBF relaxation.

    ``sigma`` is the kernel width of exp(-d^2 / (2 sigma^2)); the hard kind
    uses the system's target radius instead.  ``rbf_max`` takes the best
    kernel value over all intermediate states and truncates the path there.
    """

    kind: str = "rbf_max"
    sigma: float = 3.0

    def __post_init__(self):
        if self.kind not in INDICATOR_KINDS:
            raise ObjectiveError(f"unknown indicator kind {self.kind!r}")
        if self.kind != "hard" and self.sigma <= 0:
            raise ObjectiveError("rbf indicator needs sigma > 0")


def target_distances(system: SystemSpec, positions: np.ndarray) -> np.ndarray:
    """Distance from each state to the optimally aligned target position."""
    positions = np.atleast_2d(positions)
    _rot, aligned = target_frames(system, positions)
    return np.linalg.norm(aligned - positions, axis=-1)


def indicator(spec: IndicatorSpec, system: SystemSpec, path: Path) -> tuple:
    """(log indicator value, truncation index) for one path."""
    if path.length < 1:
        raise ObjectiveError("empty path")
    if spec.kind == "hard":
        hit = bool(system.in_target(path.final_position()))
        return (0.0 if hit else HARD_REJECT_LOG), path.length
    dists = target_distances(system, path.positions)
    logk = -0.5 * (dists / spec.sigma) ** 2
    if spec.kind == "rbf_final":
        return float(logk[-1]), path.length
    ell = int(np.argmax(logk))
    return float(logk[ell]), ell


def _rescale(system: SystemSpec, path: Path) -> float:
    """r = sqrt(T_gen / T_base): converts stored noises/controls to the
    base-temperature standardization."""
    return float(np.sqrt(path.gen_temperature / system.base_temperature))


def _log_density_constant(system: SystemSpec, n_steps: int) -> float:
    """Sum of Gaussian normalizers for n_steps base-temperature kernels."""
    sigma = system.noise_scale(system.base_temperature)
    per_step = -np.sum(np.log(sigma * np.sqrt(2.0 * np.pi * system.dt)))
    return float(n_steps * per_step)


def log_p0_cached(system: SystemSpec, path: Path, upto: int | None = None) -> float:
    """Base-temperature unbiased log-density from stored noises alone."""
    ell = path.length if upto is None else int(upto)
    r = _rescale(system, path)
    a = r * (path.noises[:ell] + path.policy_values[:ell] * np.sqrt(system.dt))
    return float(-0.5 * np.sum(a * a) + _log_density_constant(system, ell))


def log_path_density(system: SystemSpec, path: Path,
                     params: PolicyParams | None, upto: int | None = None) -> float:
    """log p_v of the stored path under the policy ``params`` (None = unbiased),
    with Gaussian Euler-Maruyama kernels at the base temperature.

    This is the independent density route; it re-evaluates the policy at the
    stored states instead of using stored control values.
    """
    ell = path.length if upto is None else int(upto)
    if ell > path.length:
        raise ObjectiveError("truncation beyond path length")
    r = _rescale(system, path)
    sqdt = np.sqrt(system.dt)
    a = r * (path.noises[:ell] + path.policy_values[:ell] * sqdt)
    if params is None:
        resid = a
    else:
        sigma = system.noise_scale(system.base_temperature)
        v = bias_force(params, system, path.positions[:ell]) / (system.masses * sigma)
        resid = a - v * sqdt
    return float(-0.5 * np.sum(resid * resid) + _log_density_constant(system, ell))


def ensure_indicator(spec: IndicatorSpec, system: SystemSpec, path: Path) -> None:
    """Populate the path's cached indicator value, truncation, and log p0."""
    logv, ell = indicator(spec, system, path)
    path.log_indicator = logv
    path.trunc_index = ell
    path.log_p0 = log_p0_cached(system, path, upto=ell)


def f_hat(system: SystemSpec, path: Path, params: PolicyParams,
          spec: IndicatorSpec | None = None) -> float:
    """Divergence value of one path under the current policy (plain numpy)."""
    if path.trunc_index is None or path.log_indicator is None:
        if spec is None:
            raise ObjectiveError("path has no cached indicator; pass a spec")
        ensure_indicator(spec, system, path)
    ell = path.trunc_index
    r = _rescale(system, path)
    dt = system.dt
    sqdt = np.sqrt(dt)
    sigma = system.noise_scale(system.base_temperature)
    v = bias_force(params, system, path.positions[:ell]) / (system.masses * sigma)
    c = r * (path.policy_values[:ell] * dt + path.noises[:ell] * sqdt)
    per_step = 0.5 * dt * np.sum(v * v, axis=1) - np.sum(v * c, axis=1)
    return float(np.sum(per_step) + path.log_indicator)


@dataclass
class LossValue:
    """Batch loss with per-path residuals and density diagnostics."""

    loss: float
    residuals: np.ndarray
    w: float
    mean_log_p0: float
    mean_log_pv: float
    mean_log_indicator: float
    n_rejected: int = 0


def _batch_states(system: SystemSpec, paths: list) -> tuple:
    """Concatenate truncated states of a path batch for one tape pass."""
    states, seg, cvals = [], [], []
    for k, p in enumerate(paths):
        ell = p.trunc_index
        states.append(p.positions[:ell])
        seg.append(np.full(ell, k, dtype=np.intp))
        r = _rescale(system, p)
        cvals.append(r * (p.policy_values[:ell] * system.dt
                          + p.noises[:ell] * np.sqrt(system.dt)))
    return (np.concatenate(states, axis=0), np.concatenate(seg),
            np.concatenate(cvals, axis=0))


def _fhat_batch_tape(tape, leaves, params, system, paths):
    """(K,) tensor of Fhat values for a batch, sharing one MLP evaluation."""
    R_all, seg, c_all = _batch_states(system, paths)
    K = len(paths)
    v = policy_values_tape(tape, leaves, params, system, R_all,
                           system.base_temperature)
    half_dt = tape.constant(0.5 * system.dt)
    per_state = ad.sub(ad.mul(ad.tsum(ad.square(v), axis=1), half_dt),
                       ad.tsum(ad.mul(v, tape.constant(c_all)), axis=1))
    sums = ad.segment_sum(per_state, seg, K)
    log1b = tape.constant(np.array([p.log_indicator for p in paths]))
    return ad.add(sums, log1b)


def loss_and_grads(system: SystemSpec, params: PolicyParams, paths: list,
                   spec: IndicatorSpec, control: str = "learned",
                   chunk_states: int = 4096) -> tuple:
    """Mean squared residual over a path batch, with parameter gradients.

    Returns (LossValue, theta_grads, w_grad).  ``theta_grads`` follows
    ``params.flat_parameters()`` order.  ``control`` picks the residual
    baseline: "learned" uses params.w (which then receives its own
    gradient), "local" uses the batch mean, making the loss the sample
    variance of the log ratios.

    Work is chunked so tape memory stays bounded; per-path residuals are
    exact either way.
    """
    if not paths:
        raise ObjectiveError("empty batch")
    if control not in ("learned", "local"):
        raise ObjectiveError(f"unknown control variate mode {control!r}")
    for p in paths:
        if p.trunc_index is None or p.log_indicator is None:
            ensure_indicator(spec, system, p)

    K = len(paths)
    chunks: list[list] = []
    cur, cur_states = [], 0
    for p in paths:
        cur.append(p)
        cur_states += p.trunc_index
        if cur_states >= chunk_states:
            chunks.append(cur)
            cur, cur_states = [], 0
    if cur:
        chunks.append(cur)

    if control == "local":
        # two passes: the baseline is the batch mean of Fhat
        fhat_all = []
        for chunk in chunks:
            tape = ad.Tape()
            leaves = params_to_tape(tape, params)
            fhat_all.append(_fhat_batch_tape(tape, leaves, params, system, chunk).data)
        fhat_all = np.concatenate(fhat_all)
        baseline = float(np.mean(fhat_all))
    else:
        baseline = params.w

    theta_grads = None
    w_grad = 0.0
    residuals = []
    loss_sum = 0.0
    for chunk in chunks:
        tape = ad.Tape()
        leaves = params_to_tape(tape, params)
        fhat = _fhat_batch_tape(tape, leaves, params, system, chunk)
        resid = ad.sub(fhat, tape.constant(baseline))
        sq = ad.tsum(ad.square(resid))
        grads = ad.gradient(sq, leaves)
        if theta_grads is None:
            theta_grads = [g.data.copy() for g in grads]
        else:
            for acc, g in zip(theta_grads, grads):
                acc += g.data
        residuals.append(resid.data.copy())
        loss_sum += sq.item()
        w_grad += float(np.sum(-2.0 * resid.data))
        del tape, leaves, fhat, resid, sq, grads

    # tapes are cyclic (tensor <-> node); collect promptly after big batches
    # so chunk arrays do not pile up across updates
    if len(chunks) > 1:
        import gc
        gc.collect()

    residuals = np.concatenate(residuals)
    loss = loss_sum / K
    theta_grads = [g / K for g in theta_grads]
    w_grad = w_grad / K
    if not np.isfinite(loss):
        raise ObjectiveError("non-finite loss")
    for g in theta_grads:
        if not np.all(np.isfinite(g)):
            raise ObjectiveError("non-finite gradient")

    log1b = np.array([p.log_indicator for p in paths])
    logp0 = np.array([p.log_p0 for p in paths])
    fhat_vals = residuals + baseline
    logpv = logp0 + log1b - fhat_vals
    value = LossValue(
        loss=loss, residuals=residuals, w=baseline,
        mean_log_p0=float(np.mean(logp0)),
        mean_log_pv=float(np.mean(logpv)),
        mean_log_indicator=float(np.mean(log1b)),
        n_rejected=int(np.sum(log1b <= HARD_REJECT_LOG)),
    )
    return value, theta_grads, w_grad


# ---------------------------------------------------------------------------
# Replay buffer.

class ReplayBuffer:
    """Bounded FIFO store of paths from past policies."""

    def __init__(self, capacity: int, spec: IndicatorSpec, system: SystemSpec):
        if capacity < 1:
            raise ObjectiveError("capacity must be >= 1")
        self.capacity = capacity
        self.spec = spec
        self.system = system
        self.paths: deque = deque()
        self.insert_count = 0

    def __len__(self) -> int:
        return len(self.paths)

    def push(self, paths: list) -> None:
        """Append paths (oldest evicted beyond capacity), caching indicators."""
        for p in paths:
            ensure_indicator(self.spec, self.system, p)
            self.paths.append(p)
            self.insert_count += 1
            if len(self.paths) > self.capacity:
                self.paths.popleft()

    def sample(self, k: int, rng: np.random.Generator) -> list:
        """k paths uniformly without replacement."""
        if k < 1 or k > len(self.paths):
            raise ObjectiveError(f"cannot sample {k} of {len(self.paths)} paths")
        idx = rng.choice(len(self.paths), size=k, replace=False)
        return [self.paths[int(i)] for i in idx]

    def save(self, filename: str) -> None:
        import json

        with open(filename, "wb") as fh:
            fh.write(np.array([len(self.paths)], dtype="<i8").tobytes())
            for p in self.paths:
                write_path_binary(fh, p)
        manifest = {
            "capacity": self.capacity,
            "insert_count": self.insert_count,
            "size": len(self.paths),
            "indicator": {"kind": self.spec.kind, "sigma": self.spec.sigma},
            "system": self.system.name,
        }
        with open(filename + ".json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, filename: str, system: SystemSpec) -> "ReplayBuffer":
        import json

        with open(filename + ".json") as fh:
            manifest = json.load(fh)
        spec = IndicatorSpec(**manifest["indicator"])
        buf = cls(manifest["capacity"], spec, system)
        with open(filename, "rb") as fh:
            (n,) = np.frombuffer(fh.read(8), dtype="<i8")
            for _ in range(int(n)):
                buf.paths.append(read_path_binary(fh))
        for p in buf.paths:
            ensure_indicator(spec, system, p)
        buf.insert_count = manifest["insert_count"]
        return buf
