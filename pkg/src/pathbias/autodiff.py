"""Reverse-mode automatic differentiation on dense float64 arrays.

Define-by-run tape: every operation executes eagerly in numpy and appends a
node to the tape of its operands.  The backward pass is itself built out of
tape operations, so a gradient is an ordinary tape value that can be
differentiated again.  That second-order capability is what lets a bias
force be defined as the input-gradient of a scalar network and still receive
parameter gradients during training.

Performance note: all heavy lifting happens inside numpy kernels, so tapes
are meant to be built over *batched* tensors (one matmul node for a whole
batch of states), not over scalars.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(ValueError):
    """Raised for malformed tapes: shape mismatches, bad gradient requests."""


class NonFiniteError(FloatingPointError):
    """Raised when a checked tensor contains NaN or Inf."""


def _as_array(value) -> np.ndarray:
    out = np.asarray(value, dtype=np.float64)
    return np.ascontiguousarray(out)


class Tensor:
    """A float64 array bound to a node of a :class:`Tape`.

    Tensors are immutable values; ``data`` must not be written to after
    construction.  A tensor participates in gradients iff ``requires_grad``.
    """

    __slots__ = ("tape", "node_id", "data", "requires_grad")

    def __init__(self, tape: "Tape", node_id: int, data: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.node_id = node_id
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor contains non-finite entries")
        return self

    # Operator sugar.  Scalars are auto-wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    def __radd__(self, other):
        return add(_wrap(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    def __rmul__(self, other):
        return mul(_wrap(self.tape, other), self)

    def __neg__(self):
        return mul(self, _wrap(self.tape, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node_id})"


class _Node:
    __slots__ = ("op", "parents", "aux", "out")

    def __init__(self, op: str, parents: tuple, aux, out: Tensor):
        self.op = op
        self.parents = parents  # node ids
        self.aux = aux
        self.out = out


class Tape:
    """Ordered record of primitive operations (parents precede children).

    A tape instance is single-threaded.  Independent tapes are pure functions
    of their inputs and may be evaluated concurrently.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def _emit(self, op: str, parents: tuple, aux, data: np.ndarray, requires_grad: bool) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"op '{op}' produced non-finite values")
        t = Tensor(self, len(self.nodes), data, requires_grad)
        self.nodes.append(_Node(op, parents, aux, t))
        return t

    def input(self, value) -> Tensor:
        """Declare a differentiable leaf (parameter or input)."""
        return self._emit("leaf", (), None, _as_array(value), requires_grad=True)

    def constant(self, value) -> Tensor:
        """Declare a non-differentiable leaf."""
        return self._emit("leaf", (), None, _as_array(value), requires_grad=False)

    def replay(self, bindings: dict) -> list[np.ndarray]:
        """Re-execute every node with leaf values overridden by ``bindings``.

        ``bindings`` maps leaf Tensors to replacement arrays.  Returns the
        recomputed value of every node, in tape order.  Only forward tapes
        replay faithfully: nodes recorded by a backward pass capture
        value-dependent constants (e.g. relu masks) and are not re-derived.
        """
        values: list[np.ndarray] = []
        bound = {t.node_id: _as_array(v) for t, v in bindings.items()}
        for node in self.nodes:
            if node.op == "leaf":
                val = bound.get(node.out.node_id, node.out.data)
                if val.shape != node.out.data.shape:
                    raise AutodiffError(
                        f"replay binding shape {val.shape} != declared {node.out.data.shape}")
            else:
                val = _FORWARD[node.op]([values[p] for p in node.parents], node.aux)
            values.append(val)
        return values


def _wrap(tape: Tape, value) -> Tensor:
    if isinstance(value, Tensor):
        if value.tape is not tape:
            raise AutodiffError("tensors belong to different tapes")
        return value
    return tape.constant(value)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise AutodiffError("tensors belong to different tapes")
    return tape


# ---------------------------------------------------------------------------
# Forward kernels, keyed by op name (used both eagerly and in replay).

def _fwd_add(vals, aux):
    return vals[0] + vals[1]


def _fwd_mul(vals, aux):
    return vals[0] * vals[1]


def _fwd_matmul(vals, aux):
    ta, tb = aux
    a = vals[0].T if ta else vals[0]
    b = vals[1].T if tb else vals[1]
    return a @ b


def _fwd_relu(vals, aux):
    return np.maximum(vals[0], 0.0)


def _fwd_relu_bwd(vals, aux):
    # fused mask-multiply: g where x > 0 else 0 (subgradient 0 at the kink)
    g, x = vals
    return np.where(x > 0.0, g, 0.0)


def _fwd_softplus(vals, aux):
    # log(1 + e^x), overflow-safe
    return np.logaddexp(0.0, vals[0])


def _fwd_sigmoid(vals, aux):
    x = vals[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fwd_square(vals, aux):
    return vals[0] * vals[0]


def _fwd_sqrt(vals, aux):
    return np.sqrt(vals[0])


def _fwd_recip(vals, aux):
    return 1.0 / vals[0]


def _fwd_sum(vals, aux):
    axis, keepdims = aux
    return np.sum(vals[0], axis=axis, keepdims=keepdims)


def _fwd_bcast(vals, aux):
    return np.broadcast_to(vals[0], aux).copy()


def _fwd_reshape(vals, aux):
    return np.reshape(vals[0], aux).copy()


def _fwd_concat(vals, aux):
    return np.concatenate(vals, axis=aux)


def _fwd_slice(vals, aux):
    return vals[0][aux].copy()


def _fwd_unslice(vals, aux):
    key, shape = aux
    out = np.zeros(shape, dtype=np.float64)
    out[key] = vals[0]
    return out


def _fwd_gather(vals, aux):
    return vals[0][aux].copy()


def _fwd_scatter_add(vals, aux):
    idx, length = aux
    if vals[0].ndim == 1:
        return np.bincount(idx, weights=vals[0], minlength=length)[:length]
    out = np.zeros((length,) + vals[0].shape[1:], dtype=np.float64)
    np.add.at(out, idx, vals[0])
    return out


_FORWARD = {
    "add": _fwd_add,
    "mul": _fwd_mul,
    "matmul": _fwd_matmul,
    "relu": _fwd_relu,
    "relu_bwd": _fwd_relu_bwd,
    "softplus": _fwd_softplus,
    "sigmoid": _fwd_sigmoid,
    "square": _fwd_square,
    "sqrt": _fwd_sqrt,
    "recip": _fwd_recip,
    "sum": _fwd_sum,
    "bcast": _fwd_bcast,
    "reshape": _fwd_reshape,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "unslice": _fwd_unslice,
    "gather": _fwd_gather,
    "scatter_add": _fwd_scatter_add,
}


# ---------------------------------------------------------------------------
# Primitive ops (public surface).

def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    data = a.data + b.data
    return tape._emit("add", (a.node_id, b.node_id), None, data,
                      a.requires_grad or b.requires_grad)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, mul(b, b.tape.constant(-1.0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    return tape._emit("mul", (a.node_id, b.node_id), None, a.data * b.data,
                      a.requires_grad or b.requires_grad)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    tape = _same_tape(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise AutodiffError("matmul expects 2-D operands")
    av = a.data.T if transpose_a else a.data
    bv = b.data.T if transpose_b else b.data
    if av.shape[1] != bv.shape[0]:
        raise AutodiffError(f"matmul inner dims differ: {av.shape} x {bv.shape}")
    return tape._emit("matmul", (a.node_id, b.node_id), (transpose_a, transpose_b),
                      av @ bv, a.requires_grad or b.requires_grad)


def relu(a: Tensor) -> Tensor:
    return a.tape._emit("relu", (a.node_id,), None, np.maximum(a.data, 0.0), a.requires_grad)


def relu_bwd(g: Tensor, x: Tensor) -> Tensor:
    tape = _same_tape(g, x)
    return tape._emit("relu_bwd", (g.node_id, x.node_id), None,
                      _fwd_relu_bwd([g.data, x.data], None), g.requires_grad)


def softplus(a: Tensor) -> Tensor:
    return a.tape._emit("softplus", (a.node_id,), None, _fwd_softplus([a.data], None),
                        a.requires_grad)


def sigmoid(a: Tensor) -> Tensor:
    return a.tape._emit("sigmoid", (a.node_id,), None, _fwd_sigmoid([a.data], None),
                        a.requires_grad)


def square(a: Tensor) -> Tensor:
    return a.tape._emit("square", (a.node_id,), None, a.data * a.data, a.requires_grad)


def sqrt(a: Tensor) -> Tensor:
    return a.tape._emit("sqrt", (a.node_id,), None, np.sqrt(a.data), a.requires_grad)


def recip(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        data = 1.0 / a.data
    return a.tape._emit("recip", (a.node_id,), None, data, a.requires_grad)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return a.tape._emit("sum", (a.node_id,), (axis, keepdims),
                        np.sum(a.data, axis=axis, keepdims=keepdims), a.requires_grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), a.tape.constant(1.0 / n))


def bcast(a: Tensor, shape: tuple) -> Tensor:
    return a.tape._emit("bcast", (a.node_id,), tuple(shape),
                        _fwd_bcast([a.data], tuple(shape)), a.requires_grad)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return a.tape._emit("reshape", (a.node_id,), tuple(shape),
                        np.reshape(a.data, shape).copy(), a.requires_grad)


def concat(tensors: list, axis: int = 0) -> Tensor:
    tape = _same_tape(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return tape._emit("concat", tuple(t.node_id for t in tensors), axis, data,
                      any(t.requires_grad for t in tensors))


def tslice(a: Tensor, key) -> Tensor:
    return a.tape._emit("slice", (a.node_id,), key, a.data[key].copy(), a.requires_grad)


def unslice(a: Tensor, key, shape: tuple) -> Tensor:
    """Embed ``a`` into zeros of ``shape`` at ``key`` (adjoint of slicing)."""
    return a.tape._emit("unslice", (a.node_id,), (key, tuple(shape)),
                        _fwd_unslice([a.data], (key, tuple(shape))), a.requires_grad)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    return a.tape._emit("gather", (a.node_id,), idx, a.data[idx].copy(), a.requires_grad)


def scatter_add(a: Tensor, index: np.ndarray, length: int) -> Tensor:
    """Sum rows of ``a`` into ``length`` output rows selected by ``index``."""
    idx = np.asarray(index, dtype=np.intp)
    return a.tape._emit("scatter_add", (a.node_id,), (idx, int(length)),
                        _fwd_scatter_add([a.data], (idx, int(length))), a.requires_grad)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    return scatter_add(a, segment_ids, num_segments)


def square_sum(a: Tensor, axis=None) -> Tensor:
    return tsum(square(a), axis=axis)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot product of two (B, d) tensors -> (B,)."""
    return tsum(mul(a, b), axis=1)


# ---------------------------------------------------------------------------
# Backward pass.

def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    reduce_axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if reduce_axes:
        g = tsum(g, axis=reduce_axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


def _vjp(node: _Node, g: Tensor) -> list:
    """Per-primitive vector-Jacobian products, emitted as tape ops.

    Returns [(parent_id, contribution Tensor), ...]; contributions to
    non-differentiable parents are skipped by the caller.
    """
    tape = g.tape
    op = node.op
    parents = node.parents
    out = node.out
    if op == "add":
        a, b = (tape.nodes[p].out for p in parents)
        return [(parents[0], _sum_to(g, a.shape)), (parents[1], _sum_to(g, b.shape))]
    if op == "mul":
        a, b = (tape.nodes[p].out for p in parents)
        return [(parents[0], _sum_to(mul(g, b), a.shape)),
                (parents[1], _sum_to(mul(g, a), b.shape))]
    if op == "matmul":
        a, b = (tape.nodes[p].out for p in parents)
        ta, tb = node.aux
        if not ta and not tb:
            ga = matmul(g, b, transpose_b=True)
            gb = matmul(a, g, transpose_a=True)
        elif ta and not tb:
            ga = matmul(b, g, transpose_b=True)
            gb = matmul(a, g)
        elif not ta and tb:
            ga = matmul(g, b)
            gb = matmul(g, a, transpose_a=True)
        else:
            ga = matmul(b, g, transpose_a=True, transpose_b=True)
            gb = matmul(g, a, transpose_a=True, transpose_b=True)
        return [(parents[0], ga), (parents[1], gb)]
    if op == "relu":
        x = tape.nodes[parents[0]].out
        return [(parents[0], relu_bwd(g, x))]
    if op == "relu_bwd":
        x = tape.nodes[parents[1]].out
        # the mask is locally constant in x, so only the g-parent gets adjoint
        return [(parents[0], relu_bwd(g, x))]
    if op == "softplus":
        x = tape.nodes[parents[0]].out
        return [(parents[0], mul(g, sigmoid(x)))]
    if op == "sigmoid":
        s = out
        one = tape.constant(1.0)
        return [(parents[0], mul(g, mul(s, sub(one, s))))]
    if op == "square":
        x = tape.nodes[parents[0]].out
        return [(parents[0], mul(g, mul(x, tape.constant(2.0))))]
    if op == "sqrt":
        return [(parents[0], mul(g, recip(mul(out, tape.constant(2.0)))))]
    if op == "recip":
        return [(parents[0], mul(mul(g, tape.constant(-1.0)), square(out)))]
    if op == "sum":
        x = tape.nodes[parents[0]].out
        axis, keepdims = node.aux
        gk = g
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            kshape = list(x.shape)
            for ax in axes:
                kshape[ax] = 1
            gk = reshape(g, tuple(kshape))
        elif axis is None and not keepdims:
            gk = reshape(g, (1,) * x.ndim)
        return [(parents[0], bcast(gk, x.shape))]
    if op == "bcast":
        x = tape.nodes[parents[0]].out
        return [(parents[0], _sum_to(g, x.shape))]
    if op == "reshape":
        x = tape.nodes[parents[0]].out
        return [(parents[0], reshape(g, x.shape))]
    if op == "concat":
        axis = node.aux
        grads = []
        offset = 0
        for pid in parents:
            x = tape.nodes[pid].out
            n = x.shape[axis]
            key = tuple(slice(None) if i != axis else slice(offset, offset + n)
                        for i in range(x.ndim))
            grads.append((pid, tslice(g, key)))
            offset += n
        return grads
    if op == "slice":
        x = tape.nodes[parents[0]].out
        return [(parents[0], unslice(g, node.aux, x.shape))]
    if op == "unslice":
        key, _shape = node.aux
        return [(parents[0], tslice(g, key))]
    if op == "gather":
        x = tape.nodes[parents[0]].out
        return [(parents[0], scatter_add(g, node.aux, x.shape[0]))]
    if op == "scatter_add":
        idx, _length = node.aux
        return [(parents[0], gather(g, idx))]
    raise AutodiffError(f"no vjp for op '{op}'")


def gradient(output: Tensor, wrt: list) -> list:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. leaf tensors.

    The returned tensors live on the same tape and are differentiable again
    (the backward pass emits ordinary tape nodes).
    """
    if output.size != 1:
        raise AutodiffError(f"gradient needs a scalar output, got shape {output.shape}")
    tape = output.tape
    for t in wrt:
        if t.tape is not tape:
            raise AutodiffError("gradient target not on this tape")
        if tape.nodes[t.node_id].op != "leaf":
            raise AutodiffError("gradient targets must be leaf tensors")
        if not t.requires_grad:
            raise AutodiffError("gradient requested for a constant leaf")

    adjoint: dict[int, Tensor] = {}
    seed = tape.constant(np.ones(output.shape))
    adjoint[output.node_id] = seed

    # Mark nodes that influence the output; others never receive adjoints.
    influences = np.zeros(output.node_id + 1, dtype=bool)
    influences[output.node_id] = True
    for nid in range(output.node_id, -1, -1):
        if not influences[nid]:
            continue
        for p in tape.nodes[nid].parents:
            influences[p] = True

    for nid in range(output.node_id, -1, -1):
        g = adjoint.pop(nid, None)
        if g is None or not influences[nid]:
            continue
        node = tape.nodes[nid]
        if node.op == "leaf":
            adjoint[nid] = g  # keep for collection below
            continue
        for pid, contrib in _vjp(node, g):
            parent = tape.nodes[pid].out
            if not parent.requires_grad:
                continue
            prev = adjoint.get(pid)
            adjoint[pid] = contrib if prev is None else add(prev, contrib)

    grads = []
    for t in wrt:
        g = adjoint.get(t.node_id)
        if g is None:
            g = tape.constant(np.zeros(t.shape))
        grads.append(g)
    return grads


def evaluate(tape: Tape, bindings: dict, output: Tensor) -> np.ndarray:
    """Replay ``tape`` with new leaf values and return ``output``'s value."""
    values = tape.replay(bindings)
    return values[output.node_id]
