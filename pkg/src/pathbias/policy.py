"""Bias-force parameterizations on a shared MLP.

Three ways to turn a network into a force on a system with target R_B:

* mode "F": the net predicts the force directly in the aligned frame;
  the output is rotated back to the world frame.
* mode "P": the net predicts a scalar bias potential of the (aligned) state;
  the force is minus its input-gradient, taken with respect to positions.
* mode "S": the net predicts per-coordinate softplus-positive scaling factors
  of the displacement toward the aligned target, so the bias always points
  "toward" R_B regardless of parameters.

Inputs are per-atom aligned positions concatenated with the per-atom distance
to the aligned target, flattened in atom order.  Planar systems skip
alignment (identity frame); 3-D systems use the Kabsch rotation, which is
held fixed during differentiation.

Every mode exists twice: a plain-numpy fast path used inside rollouts, and a
tape version used by the training loss (which needs gradients w.r.t. the
parameters, in P-mode through the input-gradient itself).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import kabsch_align_batch
from .systems import SystemSpec

MODES = ("F", "P", "S")


class PolicyError(ValueError):
    pass


def feature_size(system: SystemSpec) -> int:
    return system.n_atoms * (system.spatial_dim + 1)


def output_size(system: SystemSpec, mode: str) -> int:
    return 1 if mode == "P" else system.dim


@dataclass
class PolicyParams:
    """MLP weights plus the scalar control variate w."""

    mode: str
    weights: list
    biases: list
    w: float = 0.0
    hidden: tuple = ()

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mode, [w.copy() for w in self.weights],
                            [b.copy() for b in self.biases], self.w, self.hidden)

    def flat_parameters(self) -> list:
        """Interleaved [W0, b0, W1, b1, ...]; the training update order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def check_finite(self) -> None:
        for arr in self.flat_parameters():
            if not np.all(np.isfinite(arr)):
                raise PolicyError("non-finite policy parameters")
        if not np.isfinite(self.w):
            raise PolicyError("non-finite control variate")


def init_params(system: SystemSpec, mode: str, hidden_width: int = 64,
                n_hidden: int = 3, seed: int = 0) -> PolicyParams:
    """Kaiming-uniform hidden layers; the final layer starts at zero.

    Zero final layers make F and P start as exactly unbiased dynamics.  For
    S the softplus turns a zero pre-activation into a ln(2) scaling, so the
    initial field already points at the target; that is intentional.
    """
    if mode not in MODES:
        raise PolicyError(f"unknown mode {mode!r}")
    rng = np.random.Generator(np.random.Philox(key=np.array(
        [np.uint64(seed), np.uint64(0xB1A5)], dtype=np.uint64)))
    sizes = [feature_size(system)] + [hidden_width] * n_hidden + [output_size(system, mode)]
    weights, biases = [], []
    for li in range(len(sizes) - 1):
        fan_in = sizes[li]
        if li == len(sizes) - 2:
            W = np.zeros((sizes[li], sizes[li + 1]))
        else:
            bound = np.sqrt(6.0 / fan_in)
            W = rng.uniform(-bound, bound, size=(sizes[li], sizes[li + 1]))
        weights.append(W)
        biases.append(np.zeros(sizes[li + 1]))
    return PolicyParams(mode, weights, biases, 0.0, tuple([hidden_width] * n_hidden))


# ---------------------------------------------------------------------------
# Frames and features.

def target_frames(system: SystemSpec, R: np.ndarray) -> tuple:
    """Per-state rotation/translation carrying R_B onto each state.

    Identity for systems that skip alignment.  Returns (rot (B,d,d),
    aligned_target (B, dim)).
    """
    B = R.shape[0]
    d = system.spatial_dim
    N = system.n_atoms
    if not system.use_alignment:
        rot = np.tile(np.eye(d), (B, 1, 1))
        aligned = np.tile(system.R_B, (B, 1))
        return rot, aligned
    Pb = R.reshape(B, N, d)
    Q = system.R_B.reshape(N, d)
    rot, trans = kabsch_align_batch(Pb, Q)
    aligned = np.einsum("bij,nj->bni", rot, Q) + trans[:, None, :]
    return rot, aligned.reshape(B, N * d)


def featurize(system: SystemSpec, R: np.ndarray, frames=None) -> np.ndarray:
    """Per-atom [aligned position, distance-to-aligned-target], flattened."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    B = R.shape[0]
    d = system.spatial_dim
    N = system.n_atoms
    rot, aligned = target_frames(system, R) if frames is None else frames
    if system.use_alignment:
        # position features live in the target's frame: rho^{-1}(R) = rot^T (R - t)
        # with t recovered from aligned = rot R_B + t (shared across atoms)
        t = aligned.reshape(B, N, d) - np.einsum(
            "bij,nj->bni", rot, system.R_B.reshape(N, d))
        t = t[:, 0, :]
        pos_feat = np.einsum("bji,bnj->bni", rot, R.reshape(B, N, d) - t[:, None, :])
    else:
        pos_feat = R.reshape(B, N, d)
    diff = aligned.reshape(B, N, d) - R.reshape(B, N, d)
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    return np.concatenate([pos_feat, dist], axis=-1).reshape(B, N * (d + 1))


# ---------------------------------------------------------------------------
# Fast numpy MLP.

def mlp_forward(params: PolicyParams, x: np.ndarray, keep: bool = False):
    """Forward pass; with ``keep`` returns activations for a manual backward."""
    h = x
    layers = list(zip(params.weights, params.biases))
    acts = [h]
    for li, (W, b) in enumerate(layers):
        h = h @ W + b
        if li < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return (h, acts) if keep else h


def mlp_input_grad(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    """d(sum of outputs)/dx for a scalar-output MLP, batched."""
    h, acts = mlp_forward(params, x, keep=True)
    layers = list(zip(params.weights, params.biases))
    g = np.ones_like(h)
    for li in range(len(layers) - 1, -1, -1):
        W, _b = layers[li]
        g = g @ W.T
        if li > 0:
            g = g * (acts[li] > 0.0)
    return g


def bias_force(params: PolicyParams, system: SystemSpec, R: np.ndarray,
               frames=None) -> np.ndarray:
    """World-frame bias force b(R) for a batch of positions."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    B = R.shape[0]
    d = system.spatial_dim
    N = system.n_atoms
    if frames is None:
        frames = target_frames(system, R)
    rot, aligned = frames
    feats = featurize(system, R, frames=frames)
    if params.mode == "F":
        out = mlp_forward(params, feats)
        if system.use_alignment:
            out = np.einsum("bij,bnj->bni", rot, out.reshape(B, N, d)).reshape(B, N * d)
        b = out
    elif params.mode == "S":
        scales = np.logaddexp(0.0, mlp_forward(params, feats))  # softplus > 0
        b = scales * (aligned - R)
    elif params.mode == "P":
        gfeat = mlp_input_grad(params, feats).reshape(B, N, d + 1)
        gpos_aligned = gfeat[:, :, :d]
        gdist = gfeat[:, :, d]
        if system.use_alignment:
            gpos = np.einsum("bij,bnj->bni", rot, gpos_aligned)
        else:
            gpos = gpos_aligned
        diff = R.reshape(B, N, d) - aligned.reshape(B, N, d)
        dist = np.linalg.norm(diff, axis=-1, keepdims=True)
        unit = np.where(dist > 1e-12, diff / np.maximum(dist, 1e-12), 0.0)
        grad_R = gpos + gdist[:, :, None] * unit
        b = -grad_R.reshape(B, N * d)
    else:
        raise PolicyError(f"unknown mode {params.mode!r}")
    if not np.all(np.isfinite(b)):
        raise PolicyError("non-finite network output")
    return b


class NeuralPolicy:
    """Rollout controller wrapping a parameter snapshot."""

    def __init__(self, system: SystemSpec, params: PolicyParams):
        self.system = system
        self.params = params

    def bias(self, system: SystemSpec, R: np.ndarray, step_index: int) -> np.ndarray:
        return bias_force(self.params, system, R)


# ---------------------------------------------------------------------------
# Tape versions (for the training loss).

def params_to_tape(tape: "ad.Tape", params: PolicyParams) -> list:
    """Declare every weight/bias as a differentiable tape leaf."""
    leaves = []
    for W, b in zip(params.weights, params.biases):
        leaves.append(tape.input(W))
        leaves.append(tape.input(b))
    return leaves


def _mlp_tape(leaves: list, x: "ad.Tensor") -> "ad.Tensor":
    n_layers = len(leaves) // 2
    h = x
    for li in range(n_layers):
        W, b = leaves[2 * li], leaves[2 * li + 1]
        h = ad.add(ad.matmul(h, W), b)
        if li < n_layers - 1:
            h = ad.relu(h)
    return h


def _rotate_tape(tape: "ad.Tape", local: "ad.Tensor", rot: np.ndarray,
                 N: int, d: int, inverse: bool = False) -> "ad.Tensor":
    """Apply per-state constant rotations to (B, N*d) tape tensors."""
    B = local.shape[0]
    r3 = ad.reshape(local, (B, N, d))
    cols = []
    for k in range(d):
        rk = rot[:, :, k] if inverse else rot[:, k, :]
        rk_t = tape.constant(rk[:, None, :])  # (B,1,d)
        cols.append(ad.tsum(ad.mul(r3, rk_t), axis=2, keepdims=True))
    return ad.reshape(ad.concat(cols, axis=2), (B, N * d))


def policy_values_tape(tape: "ad.Tape", leaves: list, params: PolicyParams,
                       system: SystemSpec, R: np.ndarray,
                       temperature: float) -> "ad.Tensor":
    """Standardized control v = Sigma^{-1} b / m on the tape, batched.

    ``R`` is a constant batch of recorded states; gradients flow into the
    parameter leaves only (plus, in P-mode, through the input-gradient).
    The Kabsch frame is evaluated in numpy and held constant.
    """
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    B = R.shape[0]
    d = system.spatial_dim
    N = system.n_atoms
    frames = target_frames(system, R)
    rot, aligned = frames

    if params.mode == "P":
        pos = tape.input(R)  # the one mode that differentiates w.r.t. inputs
        if system.use_alignment:
            t = aligned.reshape(B, N, d) - np.einsum(
                "bij,nj->bni", rot, system.R_B.reshape(N, d))
            t_flat = np.tile(t[:, 0, :], (1, N))
            pos_centered = ad.add(pos, tape.constant(-t_flat))
            pos_feat = _rotate_tape(tape, pos_centered, rot, N, d, inverse=True)
        else:
            pos_feat = pos
        diff = ad.add(tape.constant(aligned), ad.mul(pos, tape.constant(-1.0)))
        d3 = ad.reshape(diff, (B, N, d))
        dist = ad.sqrt(ad.add(ad.tsum(ad.square(d3), axis=2, keepdims=True),
                              tape.constant(1e-24)))
        feats = ad.reshape(
            ad.concat([ad.reshape(pos_feat, (B, N, d)), dist], axis=2),
            (B, N * (d + 1)))
        scalar = _mlp_tape(leaves, feats)
        (grad_pos,) = ad.gradient(ad.tsum(scalar), [pos])
        b = ad.mul(grad_pos, tape.constant(-1.0))
    else:
        feats = tape.constant(featurize(system, R, frames=frames))
        out = _mlp_tape(leaves, feats)
        if params.mode == "F":
            if system.use_alignment:
                out = _rotate_tape(tape, out, rot, N, d)
            b = out
        else:  # S
            scales = ad.softplus(out)
            b = ad.mul(scales, tape.constant(aligned - R))

    sigma = system.noise_scale(temperature)
    return ad.mul(b, tape.constant(1.0 / (system.masses * sigma)))


# ---------------------------------------------------------------------------
# S-mode distance-decrease guarantee.

def s_mode_step_bound(params: PolicyParams, system: SystemSpec, R: np.ndarray) -> float:
    """Largest step size with guaranteed distance decrease for this state:
    2 (b/m) . e / ||b/m||^2 with e the displacement to the aligned target."""
    if params.mode != "S":
        raise PolicyError("step bound applies to S-mode policies")
    R = np.atleast_2d(R)
    _rot, aligned = target_frames(system, R)
    e = (aligned - R)[0]
    if np.linalg.norm(e) < 1e-9:
        raise PolicyError("state coincides with aligned target")
    bm = bias_force(params, system, R)[0] / system.masses
    return float(2.0 * (bm @ e) / (bm @ bm))


def s_mode_distance_decrease(params: PolicyParams, system: SystemSpec,
                             R: np.ndarray, dt: float) -> bool:
    """Does R + b dt / m strictly decrease the aligned-target distance?"""
    R = np.atleast_2d(R)
    _rot, aligned = target_frames(system, R)
    e = (aligned - R)[0]
    if np.linalg.norm(e) < 1e-9:
        raise PolicyError("state coincides with aligned target")
    bm = bias_force(params, system, R)[0] / system.masses
    R_next = R[0] + bm * dt
    _rot2, aligned2 = target_frames(system, R_next[None, :])
    before = np.linalg.norm(e)
    after = np.linalg.norm(aligned2[0] - R_next)
    return after < before


# ---------------------------------------------------------------------------
# Checkpoints.

_CKPT_MAGIC = b"PBCKPT01"


def save_checkpoint(filename: str, params: PolicyParams, metadata: dict,
                    opt_state: dict | None = None) -> None:
    """Versioned binary of the parameters plus a JSON metadata sidecar.

    Layout: magic, mode byte, u32 layer count, per layer (u32 rows, u32
    cols, W data, b data) in little-endian float64, f64 w, u8 flag and
    optimizer moment arrays when present.
    """
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(params.mode.encode("ascii"))
    buf.write(struct.pack("<I", len(params.weights)))
    for W, b in zip(params.weights, params.biases):
        buf.write(struct.pack("<II", W.shape[0], W.shape[1]))
        buf.write(W.astype("<f8").tobytes())
        buf.write(b.astype("<f8").tobytes())
    buf.write(struct.pack("<d", params.w))
    if opt_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<q", opt_state["step"]))
        buf.write(struct.pack("<ddd", opt_state["w_m"], opt_state["w_v"], 0.0))
        for key in ("m", "v"):
            for arr in opt_state[key]:
                buf.write(arr.astype("<f8").tobytes())
    with open(filename, "wb") as fh:
        fh.write(buf.getvalue())
    with open(filename + ".json", "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(filename: str) -> tuple:
    """Returns (PolicyParams, metadata, opt_state-or-None)."""
    with open(filename, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise PolicyError("bad checkpoint magic")
        mode = fh.read(1).decode("ascii")
        if mode not in MODES:
            raise PolicyError(f"bad checkpoint mode {mode!r}")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = struct.unpack("<II", fh.read(8))
            W = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
            b = np.frombuffer(fh.read(cols * 8), dtype="<f8").copy()
            weights.append(W)
            biases.append(b)
        (w,) = struct.unpack("<d", fh.read(8))
        (flag,) = struct.unpack("<B", fh.read(1))
        opt_state = None
        if flag:
            (step,) = struct.unpack("<q", fh.read(8))
            w_m, w_v, _pad = struct.unpack("<ddd", fh.read(24))
            moments = {}
            for key in ("m", "v"):
                arrs = []
                for W in weights:
                    a = np.frombuffer(fh.read(W.size * 8), dtype="<f8").reshape(W.shape).copy()
                    arrs.append(a)
                    bsz = W.shape[1]
                    arrs.append(np.frombuffer(fh.read(bsz * 8), dtype="<f8").copy())
                moments[key] = arrs
            opt_state = {"step": step, "w_m": w_m, "w_v": w_v,
                         "m": moments["m"], "v": moments["v"]}
    hidden = tuple(W.shape[1] for W in weights[:-1])
    params = PolicyParams(mode, weights, biases, w, hidden)
    try:
        with open(filename + ".json") as fh:
            metadata = json.load(fh)
    except FileNotFoundError:
        metadata = {}
    return params, metadata, opt_state
