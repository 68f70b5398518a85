"""Append-only computation graphs with tape-based reverse-mode differentiation.

A :class:`Graph` is an arena of nodes identified by integer ids; builder
methods append nodes with full shape inference, :func:`evaluate` computes
every node's value for a given leaf binding, and :func:`backward` appends
gradient nodes.  The primitive vocabulary is fixed and closed under
differentiation: every backward rule is expressed in the same vocabulary,
so gradient nodes are ordinary nodes and can be differentiated again.
That closure is what makes meta-gradients through unrolled SGD possible.

Vocabulary: constant, leaf, add, mul, neg, matmul, transpose, relu, step,
reshape, sum, mean, broadcast (scalar-broadcast generalized to any
broadcastable source), softmax, softmax_cross_entropy, unfold, fold.
``step`` carries relu's derivative (defined as 0 at exactly 0), ``softmax``
carries the cross-entropy derivative, and ``unfold``/``fold`` are mutually
adjoint linear maps backing convolution and pooling.

Values are plain numpy arrays in the graph dtype (float32 for training,
float64 for gradient checks).  A graph is confined to a single thread
while being built or differentiated; it is rebuilt per optimization step
rather than mutated across steps, which keeps ids stable and avoids
cross-iteration aliasing.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels


class GraphError(ValueError):
    """Raised for malformed graph construction or evaluation requests."""


class ShapeError(GraphError):
    pass


class UnboundLeafError(GraphError):
    pass


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise GraphError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise GraphError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else d for i, d in enumerate(shape))
    return tuple(d for i, d in enumerate(shape) if i not in axes)


class Graph:
    """Append-only node arena. Node ids are indices into parallel lists."""

    def __init__(self, dtype=np.float32):
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise GraphError(f"unsupported dtype {dtype}; use float32 or float64")
        self.dtype = dtype
        self._ops: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._attrs: list = []
        self._const_values: dict[int, np.ndarray] = {}
        self.leaves: list[int] = []

    # -- introspection ----------------------------------------------------

    def __len__(self):
        return len(self._ops)

    def op(self, nid: int) -> str:
        return self._ops[nid]

    def shape(self, nid: int) -> tuple[int, ...]:
        return self._shapes[nid]

    def inputs(self, nid: int) -> tuple[int, ...]:
        return self._inputs[nid]

    # -- construction -----------------------------------------------------

    def _append(self, op, inputs, shape, attrs=None) -> int:
        for i in inputs:
            if not 0 <= i < len(self._ops):
                raise GraphError(f"input id {i} not in graph")
        self._ops.append(op)
        self._inputs.append(tuple(inputs))
        self._shapes.append(tuple(int(d) for d in shape))
        self._attrs.append(attrs)
        return len(self._ops) - 1

    def leaf(self, shape) -> int:
        nid = self._append("leaf", (), tuple(shape))
        self.leaves.append(nid)
        return nid

    def constant(self, value) -> int:
        arr = np.asarray(value, dtype=self.dtype)
        nid = self._append("constant", (), arr.shape)
        self._const_values[nid] = arr
        return nid

    def _broadcast_shape(self, a, b, opname):
        sa, sb = self._shapes[a], self._shapes[b]
        try:
            return np.broadcast_shapes(sa, sb)
        except ValueError:
            raise ShapeError(f"{opname}: shapes {sa} and {sb} do not broadcast") from None

    def add(self, a: int, b: int) -> int:
        return self._append("add", (a, b), self._broadcast_shape(a, b, "add"))

    def mul(self, a: int, b: int) -> int:
        return self._append("mul", (a, b), self._broadcast_shape(a, b, "mul"))

    def neg(self, a: int) -> int:
        return self._append("neg", (a,), self._shapes[a])

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.neg(b))

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self._shapes[a], self._shapes[b]
        if len(sa) < 2 or len(sb) < 2:
            raise ShapeError(f"matmul: operands must have rank >= 2, got {sa} and {sb}")
        if sa[-1] != sb[-2]:
            raise ShapeError(f"matmul: inner extents differ, {sa} vs {sb}")
        try:
            batch = np.broadcast_shapes(sa[:-2], sb[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch extents differ, {sa} vs {sb}") from None
        return self._append("matmul", (a, b), batch + (sa[-2], sb[-1]))

    def transpose(self, a: int) -> int:
        sa = self._shapes[a]
        if len(sa) < 2:
            raise ShapeError(f"transpose: rank >= 2 required, got {sa}")
        return self._append("transpose", (a,), sa[:-2] + (sa[-1], sa[-2]))

    def relu(self, a: int) -> int:
        return self._append("relu", (a,), self._shapes[a])

    def step(self, a: int) -> int:
        return self._append("step", (a,), self._shapes[a])

    def reshape(self, a: int, shape) -> int:
        shape = tuple(int(d) for d in shape)
        if math.prod(shape) != math.prod(self._shapes[a]):
            raise ShapeError(f"reshape: cannot view {self._shapes[a]} as {shape}")
        return self._append("reshape", (a,), shape)

    def reduce_sum(self, a: int, axes=None, keepdims=False) -> int:
        sa = self._shapes[a]
        ax = _norm_axes(axes, len(sa))
        return self._append(
            "sum", (a,), _reduced_shape(sa, ax, keepdims), {"axes": ax, "keepdims": keepdims}
        )

    def reduce_mean(self, a: int, axes=None, keepdims=False) -> int:
        sa = self._shapes[a]
        ax = _norm_axes(axes, len(sa))
        return self._append(
            "mean", (a,), _reduced_shape(sa, ax, keepdims), {"axes": ax, "keepdims": keepdims}
        )

    def broadcast(self, a: int, shape) -> int:
        sa = self._shapes[a]
        shape = tuple(int(d) for d in shape)
        try:
            ok = np.broadcast_shapes(sa, shape) == shape
        except ValueError:
            ok = False
        if not ok:
            raise ShapeError(f"broadcast: {sa} does not broadcast to {shape}")
        return self._append("broadcast", (a,), shape)

    def scalar_broadcast(self, a: int, shape) -> int:
        if math.prod(self._shapes[a]) != 1:
            raise ShapeError(f"scalar_broadcast: source shape {self._shapes[a]} is not scalar")
        if self._shapes[a] != ():
            a = self.reshape(a, ())
        return self.broadcast(a, shape)

    def softmax(self, a: int) -> int:
        sa = self._shapes[a]
        if len(sa) < 1:
            raise ShapeError("softmax: rank >= 1 required")
        return self._append("softmax", (a,), sa)

    def softmax_cross_entropy(self, logits: int, labels) -> int:
        sl = self._shapes[logits]
        if len(sl) != 2:
            raise ShapeError(f"softmax_cross_entropy: logits must be [batch, classes], got {sl}")
        lab = np.asarray(labels, dtype=np.int64)
        if lab.shape != (sl[0],):
            raise ShapeError(
                f"softmax_cross_entropy: {lab.shape[0] if lab.ndim else 1} labels for batch {sl[0]}"
            )
        if lab.size and (lab.min() < 0 or lab.max() >= sl[1]):
            raise GraphError(f"label out of range [0, {sl[1]}): {lab.min()}..{lab.max()}")
        return self._append("sce", (logits,), (sl[0],), {"labels": lab})

    def unfold(self, a: int, kernel, stride=(1, 1), pad=(0, 0)) -> int:
        sa = self._shapes[a]
        if len(sa) != 4:
            raise ShapeError(f"unfold: input must be [batch, ch, h, w], got {sa}")
        b, c, h, w = sa
        kh, kw = kernel
        sh, sw = stride
        ph, pw = pad
        oh = kernels.out_size(h, kh, sh, ph)
        ow = kernels.out_size(w, kw, sw, pw)
        attrs = {"kernel": (kh, kw), "stride": (sh, sw), "pad": (ph, pw), "spatial": (c, h, w)}
        return self._append("unfold", (a,), (b, c * kh * kw, oh * ow), attrs)

    def fold(self, a: int, spatial, kernel, stride=(1, 1), pad=(0, 0)) -> int:
        sa = self._shapes[a]
        if len(sa) != 3:
            raise ShapeError(f"fold: input must be [batch, ch*kh*kw, windows], got {sa}")
        c, h, w = spatial
        kh, kw = kernel
        sh, sw = stride
        ph, pw = pad
        oh = kernels.out_size(h, kh, sh, ph)
        ow = kernels.out_size(w, kw, sw, pw)
        if sa[1] != c * kh * kw or sa[2] != oh * ow:
            raise ShapeError(
                f"fold: input {sa} inconsistent with spatial {tuple(spatial)}, "
                f"kernel {tuple(kernel)}, stride {tuple(stride)}, pad {tuple(pad)}"
            )
        attrs = {"kernel": (kh, kw), "stride": (sh, sw), "pad": (ph, pw), "spatial": (c, h, w)}
        return self._append("fold", (a,), (sa[0], c, h, w), attrs)


# -- evaluation -----------------------------------------------------------


def _softmax_values(z):
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _eval_node(g: Graph, nid: int, values):
    op = g._ops[nid]
    ins = g._inputs[nid]
    attrs = g._attrs[nid]
    if op == "add":
        return values[ins[0]] + values[ins[1]]
    if op == "mul":
        return values[ins[0]] * values[ins[1]]
    if op == "neg":
        return -values[ins[0]]
    if op == "matmul":
        return values[ins[0]] @ values[ins[1]]
    if op == "transpose":
        return np.swapaxes(values[ins[0]], -1, -2)
    if op == "relu":
        return np.maximum(values[ins[0]], 0)
    if op == "step":
        return (values[ins[0]] > 0).astype(g.dtype)
    if op == "reshape":
        return values[ins[0]].reshape(g._shapes[nid])
    if op == "sum":
        return np.sum(values[ins[0]], axis=attrs["axes"], keepdims=attrs["keepdims"])
    if op == "mean":
        return np.mean(values[ins[0]], axis=attrs["axes"], keepdims=attrs["keepdims"])
    if op == "broadcast":
        return np.broadcast_to(values[ins[0]], g._shapes[nid])
    if op == "softmax":
        return _softmax_values(values[ins[0]])
    if op == "sce":
        z = values[ins[0]]
        lab = attrs["labels"]
        m = np.max(z, axis=-1)
        lse = m + np.log(np.sum(np.exp(z - m[:, None]), axis=-1))
        return lse - z[np.arange(z.shape[0]), lab]
    if op == "unfold":
        return kernels.extract_patches(
            values[ins[0]], attrs["kernel"], attrs["stride"], attrs["pad"]
        )
    if op == "fold":
        return kernels.scatter_patches(
            values[ins[0]], attrs["spatial"], attrs["kernel"], attrs["stride"], attrs["pad"]
        )
    raise GraphError(f"cannot evaluate op {op!r}")


def _eval_upto(g: Graph, bindings, upto: int):
    values = [None] * (upto + 1)
    for nid in range(upto + 1):
        op = g._ops[nid]
        if op == "constant":
            values[nid] = g._const_values[nid]
        elif op == "leaf":
            if nid not in bindings:
                raise UnboundLeafError(f"leaf {nid} has no binding")
            arr = np.asarray(bindings[nid], dtype=g.dtype)
            if arr.shape != g._shapes[nid]:
                raise ShapeError(
                    f"leaf {nid}: bound value has shape {arr.shape}, declared {g._shapes[nid]}"
                )
            if not np.all(np.isfinite(arr)):
                raise GraphError(f"leaf {nid}: bound value contains non-finite elements")
            values[nid] = arr
        else:
            values[nid] = _eval_node(g, nid, values)
    return values


def evaluate(g: Graph, bindings: dict) -> list:
    """Evaluate every node. Returns a list indexed by node id.

    Deterministic for fixed bindings: same graph, same bindings, bit-identical
    outputs.
    """
    return _eval_upto(g, bindings, len(g) - 1)


# -- differentiation ------------------------------------------------------


def _unbroadcast(g: Graph, u: int, target):
    """Reduce an upstream adjoint back to the shape of a broadcast input."""
    us = g.shape(u)
    if us == tuple(target):
        return u
    lead = len(us) - len(target)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(target) if d == 1 and us[lead + i] != 1
    )
    r = g.reduce_sum(u, axes=axes) if axes else u
    if g.shape(r) != tuple(target):
        r = g.reshape(r, target)
    return r


def _restore_reduced(g: Graph, u: int, in_shape, attrs):
    axes, keepdims = attrs["axes"], attrs["keepdims"]
    if not keepdims:
        kept = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
        u = g.reshape(u, kept)
    return u


def _vjp(g: Graph, loss: int, wrt) -> dict:
    """Append adjoint nodes for d(loss)/d(node) for each node in wrt.

    ``wrt`` entries may be any nodes (leaves, constants, or interior nodes);
    the public :func:`backward` restricts them to leaves.  Adjoints are only
    built along paths that actually connect wrt to the loss.
    """
    wrt = list(wrt)
    wrt_set = set(wrt)
    n = len(g)
    dependent = bytearray(n)
    for nid in range(n):
        if nid in wrt_set or any(dependent[i] for i in g._inputs[nid]):
            dependent[nid] = 1

    adjoint: dict[int, int] = {}
    if dependent[loss]:
        adjoint[loss] = g.constant(np.ones((), dtype=g.dtype))

    def accumulate(inp, contrib):
        if inp in adjoint:
            adjoint[inp] = g.add(adjoint[inp], contrib)
        else:
            adjoint[inp] = contrib

    for nid in range(loss, -1, -1):
        u = adjoint.get(nid)
        if u is None:
            continue
        op = g._ops[nid]
        ins = g._inputs[nid]
        attrs = g._attrs[nid]
        if op in ("leaf", "constant"):
            continue
        if op == "add":
            a, b = ins
            if dependent[a]:
                accumulate(a, _unbroadcast(g, u, g.shape(a)))
            if dependent[b]:
                accumulate(b, _unbroadcast(g, u, g.shape(b)))
        elif op == "mul":
            a, b = ins
            if dependent[a]:
                accumulate(a, _unbroadcast(g, g.mul(u, b), g.shape(a)))
            if dependent[b]:
                accumulate(b, _unbroadcast(g, g.mul(u, a), g.shape(b)))
        elif op == "neg":
            if dependent[ins[0]]:
                accumulate(ins[0], g.neg(u))
        elif op == "matmul":
            a, b = ins
            if dependent[a]:
                accumulate(a, _unbroadcast(g, g.matmul(u, g.transpose(b)), g.shape(a)))
            if dependent[b]:
                accumulate(b, _unbroadcast(g, g.matmul(g.transpose(a), u), g.shape(b)))
        elif op == "transpose":
            if dependent[ins[0]]:
                accumulate(ins[0], g.transpose(u))
        elif op == "relu":
            if dependent[ins[0]]:
                accumulate(ins[0], g.mul(g.step(ins[0]), u))
        elif op == "step":
            pass  # zero derivative almost everywhere
        elif op == "reshape":
            if dependent[ins[0]]:
                accumulate(ins[0], g.reshape(u, g.shape(ins[0])))
        elif op == "sum":
            if dependent[ins[0]]:
                in_shape = g.shape(ins[0])
                u2 = _restore_reduced(g, u, in_shape, attrs)
                accumulate(ins[0], g.broadcast(u2, in_shape))
        elif op == "mean":
            if dependent[ins[0]]:
                in_shape = g.shape(ins[0])
                count = math.prod(in_shape[i] for i in attrs["axes"])
                u2 = _restore_reduced(g, u, in_shape, attrs)
                u2 = g.mul(u2, g.constant(1.0 / count))
                accumulate(ins[0], g.broadcast(u2, in_shape))
        elif op == "broadcast":
            if dependent[ins[0]]:
                accumulate(ins[0], _unbroadcast(g, u, g.shape(ins[0])))
        elif op == "softmax":
            if dependent[ins[0]]:
                # d/dz <u, softmax(z)> = p * (u - sum(p * u, last axis))
                s = g.reduce_sum(g.mul(u, nid), axes=(-1,), keepdims=True)
                accumulate(ins[0], g.mul(nid, g.sub(u, s)))
        elif op == "sce":
            if dependent[ins[0]]:
                z = ins[0]
                b_n, c_n = g.shape(z)
                p = g.softmax(z)
                onehot = np.zeros((b_n, c_n), dtype=g.dtype)
                onehot[np.arange(b_n), attrs["labels"]] = 1.0
                diff = g.sub(p, g.constant(onehot))
                accumulate(z, g.mul(diff, g.reshape(u, (b_n, 1))))
        elif op == "unfold":
            if dependent[ins[0]]:
                accumulate(
                    ins[0],
                    g.fold(u, attrs["spatial"], attrs["kernel"], attrs["stride"], attrs["pad"]),
                )
        elif op == "fold":
            if dependent[ins[0]]:
                accumulate(ins[0], g.unfold(u, attrs["kernel"], attrs["stride"], attrs["pad"]))
        else:
            raise GraphError(f"no differentiation rule for op {op!r}")

    out = {}
    for w in wrt:
        nid = adjoint.get(w)
        if nid is None:
            nid = g.constant(np.zeros(g.shape(w), dtype=g.dtype))
        out[w] = nid
    return out


def backward(g: Graph, loss: int, wrt) -> dict:
    """Append gradient nodes of a scalar loss w.r.t. leaf nodes.

    Returns {leaf id: gradient node id}; each gradient node has the leaf's
    shape, lives in the same graph, and is itself differentiable.
    """
    if g.shape(loss) != ():
        raise GraphError(f"loss must be scalar-shaped, got {g.shape(loss)}")
    leaf_set = set(g.leaves)
    for w in wrt:
        if w not in leaf_set:
            raise GraphError(f"node {w} ({g.op(w)}) is not a leaf")
    return _vjp(g, loss, wrt)


def fd_check(g: Graph, loss: int, leaf: int, bindings: dict, epsilon: float) -> float:
    """Compare the analytic gradient of ``loss`` w.r.t. ``leaf`` against
    central finite differences, element by element.

    Returns max over elements of |analytic - numeric| / max(1, |numeric|).
    Requires a float64 graph; ``bindings`` supplies the leaf values at which
    both sides are evaluated.
    """
    if g.dtype != np.dtype(np.float64):
        raise GraphError("fd_check requires a float64 graph")
    if not 0 < epsilon <= 1e-2:
        raise GraphError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    grad_node = backward(g, loss, [leaf])[leaf]
    analytic = evaluate(g, bindings)[grad_node]

    base = np.asarray(bindings[leaf], dtype=np.float64)
    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            pert = flat.copy()
            pert[i] += sign * epsilon
            trial = dict(bindings)
            trial[leaf] = pert.reshape(base.shape)
            val = _eval_upto(g, trial, loss)[loss]
            if sign > 0:
                f_plus = float(val)
            else:
                f_minus = float(val)
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        err = abs(float(analytic.reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
