"""Trainable architectures: an MLP and a compact CNN over autodiff graphs.

A ModelSpec names the architecture, NetworkParams carries the flat parameter
vector plus its per-layer layout, and the forward pass is a graph builder so
the same code serves plain training and the unrolled meta-gradient path.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Graph, GraphError, ShapeError

MLP_HIDDEN = (256, 256)
CNN_CHANNELS = (16, 32)
CONV_KERNEL = 3
POOL = 2


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    kind: "mlp" or "cnn".
    input_shape: per-sample shape, rank 2 ([H, W], treated as one channel for
        the CNN) or rank 3 ([C_in, H, W]).
    class_count: number of output classes, >= 2.
    hidden: layer widths for the MLP, conv channels for the CNN.
    """

    kind: str
    input_shape: tuple
    class_count: int
    hidden: tuple = ()

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise GraphError(f"unknown model kind {self.kind!r}")
        if self.class_count < 2:
            raise GraphError(f"class_count must be >= 2, got {self.class_count}")
        shape = tuple(int(d) for d in self.input_shape)
        if not shape or any(d < 1 for d in shape):
            raise GraphError(f"bad input_shape {self.input_shape}")
        if self.kind == "cnn" and len(shape) not in (2, 3):
            raise GraphError(f"cnn input_shape must be rank 2 or 3, got {shape}")
        object.__setattr__(self, "input_shape", shape)
        hidden = tuple(int(d) for d in self.hidden)
        if not hidden:
            hidden = MLP_HIDDEN if self.kind == "mlp" else CNN_CHANNELS
        if any(d < 1 for d in hidden):
            raise GraphError(f"bad hidden extents {self.hidden}")
        object.__setattr__(self, "hidden", hidden)

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "hidden": list(self.hidden),
        }

    @staticmethod
    def from_dict(d):
        return ModelSpec(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            class_count=int(d["class_count"]),
            hidden=tuple(d.get("hidden", ())),
        )


def _cnn_input(shape):
    if len(shape) == 2:
        return (1,) + shape
    return shape


def layer_layout(spec: ModelSpec):
    """Ordered (name, shape, offset) entries for the flat parameter vector."""
    entries = []
    off = 0

    def push(name, shape):
        nonlocal off
        entries.append((name, tuple(shape), off))
        off += int(np.prod(shape))

    if spec.kind == "mlp":
        dims = [int(np.prod(spec.input_shape))] + list(spec.hidden) + [spec.class_count]
        for i in range(len(dims) - 1):
            push(f"fc{i}.w", (dims[i], dims[i + 1]))
            push(f"fc{i}.b", (dims[i + 1],))
    else:
        cin, h, w = _cnn_input(spec.input_shape)
        for i, cout in enumerate(spec.hidden):
            push(f"conv{i}.w", (cout, cin, CONV_KERNEL, CONV_KERNEL))
            push(f"conv{i}.b", (cout,))
            # same-padded conv keeps h x w, then 2x2 average pool floors
            h = kernels.out_size(h, POOL, POOL, 0)
            w = kernels.out_size(w, POOL, POOL, 0)
            cin = cout
        push("fc.w", (cin * h * w, spec.class_count))
        push("fc.b", (spec.class_count,))
    return tuple(entries)


def param_count(spec: ModelSpec) -> int:
    layout = layer_layout(spec)
    name, shape, off = layout[-1]
    return off + int(np.prod(shape))


@dataclass
class NetworkParams:
    """Flat parameter vector with its (name, shape, offset) layout."""

    flat: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat)
        if self.flat.ndim != 1:
            raise GraphError(f"params must be 1-D, got shape {self.flat.shape}")
        off = 0
        for name, shape, offset in self.layout:
            if offset != off:
                raise GraphError(f"layout entry {name}: offset {offset}, expected {off}")
            off += int(np.prod(shape))
        if off != self.flat.size:
            raise GraphError(f"layout covers {off} elements, flat has {self.flat.size}")

    def view(self, name):
        for n, shape, offset in self.layout:
            if n == name:
                size = int(np.prod(shape))
                return self.flat[offset : offset + size].reshape(shape)
        raise KeyError(name)

    def views(self):
        return {name: self.view(name) for name, _, _ in self.layout}

    def copy(self):
        return NetworkParams(self.flat.copy(), self.layout)


def init_params(spec: ModelSpec, seed: int, zero=False, dtype=np.float32) -> NetworkParams:
    """Glorot-uniform weights, zero biases. `zero=True` gives an all-zero vector."""
    layout = layer_layout(spec)
    flat = np.zeros(param_count(spec), dtype=dtype)
    if not zero:
        rng = np.random.Generator(np.random.PCG64(seed))
        params = NetworkParams(flat, layout)
        for name, shape, offset in layout:
            if not name.endswith(".w"):
                continue
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                cout, cin, kh, kw = shape
                fan_in, fan_out = cin * kh * kw, cout * kh * kw
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.view(name)[...] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return params
    return NetworkParams(flat, layout)


# -- forward pass as a graph builder --------------------------------------


def leaf_param_nodes(g: Graph, spec: ModelSpec):
    """One leaf per layer tensor, in layout order."""
    return {name: g.leaf(shape) for name, shape, _ in layer_layout(spec)}


def constant_param_nodes(g: Graph, spec: ModelSpec, params: NetworkParams):
    return {name: g.constant(params.view(name)) for name, _, _ in layer_layout(spec)}


def param_bindings(nodes: dict, params: NetworkParams) -> dict:
    """Leaf bindings for evaluate(): node id -> layer value."""
    return {nodes[name]: params.view(name) for name, _, _ in params.layout}


def _mlp_forward(g, spec, nodes, batch):
    b = g.shape(batch)[0]
    x = g.reshape(batch, (b, int(np.prod(spec.input_shape))))
    n_layers = len(spec.hidden) + 1
    for i in range(n_layers):
        w = nodes[f"fc{i}.w"]
        bias = nodes[f"fc{i}.b"]
        z = g.add(g.matmul(x, w), g.broadcast(bias, (b, g.shape(w)[1])))
        x = g.relu(z) if i < n_layers - 1 else z
    return x


def _cnn_forward(g, spec, nodes, batch):
    b = g.shape(batch)[0]
    cin, h, w = _cnn_input(spec.input_shape)
    x = g.reshape(batch, (b, cin, h, w))
    k, p = CONV_KERNEL, CONV_KERNEL // 2
    for i, cout in enumerate(spec.hidden):
        cols = g.unfold(x, (k, k), (1, 1), (p, p))
        wr = g.reshape(nodes[f"conv{i}.w"], (cout, cin * k * k))
        z = g.matmul(wr, cols)
        bias = g.reshape(nodes[f"conv{i}.b"], (cout, 1))
        z = g.relu(g.add(z, g.broadcast(bias, (b, cout, h * w))))
        x = g.reshape(z, (b, cout, h, w))
        pooled = g.unfold(x, (POOL, POOL), (POOL, POOL), (0, 0))
        oh = kernels.out_size(h, POOL, POOL, 0)
        ow = kernels.out_size(w, POOL, POOL, 0)
        pooled = g.reduce_mean(g.reshape(pooled, (b, cout, POOL * POOL, oh * ow)), axes=(2,))
        x = g.reshape(pooled, (b, cout, oh, ow))
        cin, h, w = cout, oh, ow
    flat = g.reshape(x, (b, cin * h * w))
    z = g.matmul(flat, nodes["fc.w"])
    return g.add(z, g.broadcast(nodes["fc.b"], (b, spec.class_count)))


def build_forward(g: Graph, spec: ModelSpec, nodes: dict, batch: int) -> int:
    """Append the forward pass; returns the logits node of shape [B, C]."""
    bs = g.shape(batch)
    if bs[1:] != spec.input_shape or len(bs) != len(spec.input_shape) + 1:
        raise ShapeError(f"batch shape {bs} does not match [B] + {spec.input_shape}")
    if spec.kind == "mlp":
        return _mlp_forward(g, spec, nodes, batch)
    return _cnn_forward(g, spec, nodes, batch)


def classification_loss(g: Graph, logits: int, labels) -> int:
    """Mean softmax cross-entropy over the batch, as a scalar node."""
    return g.reduce_mean(g.softmax_cross_entropy(logits, labels))


def forward(spec: ModelSpec, params: NetworkParams, batch) -> np.ndarray:
    """Numpy-in, numpy-out logits for evaluation paths."""
    from .autodiff import evaluate

    batch = np.asarray(batch)
    g = Graph(np.float64 if batch.dtype == np.float64 else np.float32)
    bnode = g.leaf(batch.shape)
    nodes = leaf_param_nodes(g, spec)
    logits = build_forward(g, spec, nodes, bnode)
    bindings = param_bindings(nodes, params)
    bindings[bnode] = batch
    return evaluate(g, bindings)[logits]


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches the label; ties go to the
    lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise GraphError(f"accuracy needs a non-empty [B, C] array, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise GraphError(f"{labels.size} labels for batch {logits.shape[0]}")
    return float(np.mean(np.argmax(logits, axis=1) == labels))
