"""Teacher training and the WDTB trajectory buffer.

A trajectory is the per-epoch parameter history of one teacher network
trained on the full real dataset, plus its train metrics.  Buffers are
written atomically and round trip bit-exactly.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import seeding
from .autodiff import Graph, GraphError, backward, evaluate
from .data import LabeledDataset
from .models import (
    ModelSpec,
    NetworkParams,
    accuracy,
    build_forward,
    classification_loss,
    forward,
    init_params,
    layer_layout,
    leaf_param_nodes,
    param_bindings,
)

MAGIC = b"WDTB"
BUFFER_VERSION = 1


class TrainingError(RuntimeError):
    """Teacher or student training diverged."""


class BufferError(ValueError):
    """Malformed or truncated trajectory file."""


@dataclass
class TeacherConfig:
    spec: ModelSpec
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    # teachers default to plain SGD so the distiller's inner loop, which is
    # plain SGD by construction, can actually reproduce their steps
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "seed": self.seed,
        }


@dataclass
class Trajectory:
    snapshots: list
    spec: ModelSpec
    config: TeacherConfig
    train_losses: np.ndarray
    train_accuracies: np.ndarray

    def __post_init__(self):
        t = self.config.epochs
        if len(self.snapshots) != t + 1:
            raise ValueError(f"{len(self.snapshots)} snapshots for {t} epochs")
        layout = self.snapshots[0].layout
        if any(s.layout != layout for s in self.snapshots[1:]):
            raise ValueError("snapshots disagree on parameter layout")
        self.train_losses = np.asarray(self.train_losses, dtype=np.float64)
        self.train_accuracies = np.asarray(self.train_accuracies, dtype=np.float64)
        if self.train_losses.shape != (t,) or self.train_accuracies.shape != (t,):
            raise ValueError("per-epoch metrics must have one entry per epoch")

    @property
    def epochs(self):
        return self.config.epochs


def run_sgd(
    samples,
    labels,
    spec: ModelSpec,
    params: NetworkParams,
    *,
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    seed: int,
    on_epoch=None,
):
    """In-place minibatch SGD with momentum; `on_epoch(epoch, mean_loss)`
    fires after each epoch.  Shuffle order is derived from (seed, epoch)."""
    n = samples.shape[0]
    velocity = np.zeros_like(params.flat)
    order_names = [name for name, _, _ in params.layout]
    for epoch in range(epochs):
        order = seeding.generator(seed, "shuffle", epoch).permutation(n)
        losses, weights = [], []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = samples[idx], labels[idx]
            g = Graph(np.float32)
            nodes = leaf_param_nodes(g, spec)
            bnode = g.leaf(xb.shape)
            loss = classification_loss(g, build_forward(g, spec, nodes, bnode), yb)
            grads = backward(g, loss, [nodes[nm] for nm in order_names])
            bindings = param_bindings(nodes, params)
            bindings[bnode] = xb
            try:
                vals = evaluate(g, bindings)
            except GraphError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from None
            if not np.isfinite(vals[loss]):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            losses.append(float(vals[loss]))
            weights.append(len(idx))
            gflat = np.concatenate([vals[grads[nodes[nm]]].ravel() for nm in order_names])
            velocity = momentum * velocity - lr * gflat.astype(params.flat.dtype)
            params.flat += velocity
        if on_epoch is not None:
            on_epoch(epoch, float(np.average(losses, weights=weights)))
    return params


def train_teacher(train: LabeledDataset, cfg: TeacherConfig) -> Trajectory:
    """SGD over shuffled minibatches with a parameter snapshot per epoch."""
    params = init_params(cfg.spec, seeding.derive(cfg.seed, "init"))
    snapshots = [params.copy()]
    losses, accs = [], []

    def snap(epoch, mean_loss):
        snapshots.append(params.copy())
        logits = forward(cfg.spec, params, train.samples)
        losses.append(mean_loss)
        accs.append(accuracy(logits, train.labels))

    run_sgd(
        train.samples,
        train.labels,
        cfg.spec,
        params,
        epochs=cfg.epochs,
        lr=cfg.lr,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        on_epoch=snap,
    )
    return Trajectory(snapshots, cfg.spec, cfg, np.array(losses), np.array(accs))


# -- WDTB serialization ---------------------------------------------------


def _write_blob(f, payload: bytes):
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_exact(f, count, what):
    buf = f.read(count)
    if len(buf) != count:
        raise BufferError(
            f"truncated trajectory: expected {count} bytes for {what}, got {len(buf)}"
        )
    return buf


def _read_blob(f, what) -> bytes:
    (ln,) = struct.unpack("<I", _read_exact(f, 4, what + " length"))
    return _read_exact(f, ln, what)


def save_trajectory(traj: Trajectory, path):
    layout = traj.snapshots[0].layout
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", BUFFER_VERSION))
        _write_blob(f, json.dumps(traj.spec.to_dict()).encode("utf-8"))
        _write_blob(f, json.dumps(traj.config.to_dict()).encode("utf-8"))
        f.write(struct.pack("<I", traj.epochs))
        f.write(struct.pack("<I", len(layout)))
        for name, shape, offset in layout:
            _write_blob(f, name.encode("utf-8"))
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(struct.pack("<Q", offset))
        for snap in traj.snapshots:
            f.write(snap.flat.astype("<f4", copy=False).tobytes())
        metrics = np.stack([traj.train_losses, traj.train_accuracies], axis=1)
        f.write(metrics.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise BufferError(f"{path}: not a trajectory file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != BUFFER_VERSION:
            raise BufferError(
                f"unsupported trajectory version {version}, expected {BUFFER_VERSION}"
            )
        spec = ModelSpec.from_dict(json.loads(_read_blob(f, "spec").decode("utf-8")))
        cfg_d = json.loads(_read_blob(f, "config").decode("utf-8"))
        epochs, entries = struct.unpack("<II", _read_exact(f, 8, "epoch/layout counts"))
        layout = []
        for _ in range(entries):
            name = _read_blob(f, "layout name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "layout rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "layout shape"))
            (offset,) = struct.unpack("<Q", _read_exact(f, 8, "layout offset"))
            layout.append((name, shape, offset))
        layout = tuple(layout)
        if layout != layer_layout(spec):
            raise BufferError("layout table does not match the stored model spec")
        count = sum(int(np.prod(shape)) for _, shape, _ in layout)
        snapshots = []
        for i in range(epochs + 1):
            raw = _read_exact(f, 4 * count, f"snapshot {i}")
            flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            snapshots.append(NetworkParams(flat, layout))
        raw = _read_exact(f, 16 * epochs, "metrics")
        metrics = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(epochs, 2)
    cfg = TeacherConfig(spec=spec, **cfg_d)
    if cfg.epochs != epochs:
        raise BufferError(f"header epochs {epochs} != config epochs {cfg.epochs}")
    return Trajectory(snapshots, spec, cfg, metrics[:, 0].copy(), metrics[:, 1].copy())


def sample_start(traj: Trajectory, start_cap: int, rng, lookahead: int = 0):
    """Uniform start epoch t0 < start_cap with t0 + lookahead always <= T.

    Returns (t0, copy of snapshots[t0]).
    """
    t = traj.epochs
    if not 1 <= start_cap <= t:
        raise ValueError(f"start cap {start_cap} outside [1, {t}]")
    hi = min(start_cap, t - lookahead + 1)
    if hi < 1:
        raise ValueError(f"lookahead {lookahead} exceeds trajectory length {t}")
    t0 = int(rng.integers(0, hi))
    return t0, traj.snapshots[t0].copy()
