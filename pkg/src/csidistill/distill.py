"""Trajectory-matching distillation.

A synthetic set (sample values plus a trainable inner learning rate) is
optimized so that a student initialized at a random expert snapshot and
trained on the synthetic set for a fixed number of plain-SGD steps lands
close to a later expert snapshot.  Closeness is the squared L2 gap
normalized by how far the expert itself moved, and the meta-gradient is
taken by differentiating through every unrolled inner step.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .autodiff import Graph, _vjp, backward, evaluate
from .data import LabeledDataset, Manifest, save_pack
from .models import NetworkParams, build_forward, classification_loss, layer_layout
from .trajectories import sample_start

FULL_BATCH_LIMIT = 512
INNER_CHUNK = 256
MIN_INNER_LR = 1e-6
RESAMPLE_LIMIT = 10


class DistillError(RuntimeError):
    """Meta-optimization produced a non-finite quantity."""


class DegenerateSegmentError(RuntimeError):
    """The sampled expert segment barely moved."""


@dataclass
class SyntheticDataset:
    """Learnable samples with fixed labels and a trainable inner lr."""

    samples: np.ndarray
    labels: np.ndarray
    inner_lr: float
    iteration: int = 0

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.labels.size} labels for {self.samples.shape[0]} samples"
            )
        counts = np.bincount(self.labels)
        if counts.min() < 1 or np.unique(counts).size != 1:
            raise ValueError(f"per-class counts must be equal, got {counts.tolist()}")
        if self.inner_lr <= 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")

    @property
    def spc(self):
        return int(np.bincount(self.labels)[0])

    @property
    def class_count(self):
        return int(self.labels.max()) + 1

    @property
    def sample_shape(self):
        return self.samples.shape[1:]

    def to_dataset(self, extra=None) -> LabeledDataset:
        info = {"spc": self.spc, "inner_lr": self.inner_lr, "iteration": self.iteration}
        if extra:
            info.update(extra)
        man = Manifest(
            self.class_count,
            self.sample_shape,
            split="synthetic",
            provenance=f"distilled iteration={self.iteration}",
            extra=info,
        )
        return LabeledDataset(self.samples.copy(), self.labels.copy(), man)


@dataclass
class DistillConfig:
    inner_steps: int = 16
    lookahead: int = 1
    start_cap: int = 15
    iterations: int = 2000
    lr_samples: float = 3.0
    lr_inner: float = 1e-4
    meta_momentum: float = 0.5
    inner_lr_init: float = 0.01
    denom_eps: float = 1e-12
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.lookahead < 1:
            raise ValueError(f"lookahead must be >= 1, got {self.lookahead}")
        if self.denom_eps <= 0:
            raise ValueError(f"denom_eps must be positive, got {self.denom_eps}")
        if self.inner_lr_init <= 0:
            raise ValueError(f"inner_lr_init must be positive, got {self.inner_lr_init}")

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return DistillConfig(**d)


def init_synthetic(
    real: LabeledDataset, spc: int, seed: int, inner_lr_init: float = 0.01
) -> SyntheticDataset:
    """Copy spc distinct real samples per class as the starting values."""
    c = real.manifest.class_count
    picks = []
    for label in range(c):
        idx = real.class_indices(label)
        if idx.size < spc:
            raise ValueError(f"class {label} has {idx.size} samples, need {spc}")
        rng = seeding.generator(seed, "init", label)
        picks.append(np.sort(rng.choice(idx, size=spc, replace=False)))
    order = np.concatenate(picks)
    return SyntheticDataset(
        real.samples[order].copy(), real.labels[order].copy(), inner_lr_init
    )


# -- unrolled inner loop --------------------------------------------------


def sgd_step_nodes(g: Graph, params: dict, loss: int, lr_node: int) -> dict:
    """One differentiable SGD step: each parameter minus lr times its gradient.

    Gradients are appended as graph nodes, so the returned parameters stay
    differentiable w.r.t. everything the loss depends on.
    """
    grads = _vjp(g, loss, list(params.values()))
    out = {}
    for name, node in params.items():
        stepv = g.mul(g.scalar_broadcast(lr_node, g.shape(node)), grads[node])
        out[name] = g.sub(node, stepv)
    return out


def inner_update(g: Graph, spec, params: dict, batch: int, labels, lr_node: int) -> dict:
    """One unrolled student step on a synthetic batch."""
    loss = classification_loss(g, build_forward(g, spec, params, batch), labels)
    return sgd_step_nodes(g, params, loss, lr_node)


def _segment_gap(start: NetworkParams, target: NetworkParams) -> float:
    # per-layer sums, matching the graph-side accumulation order
    total = 0.0
    for name, _, _ in start.layout:
        d = start.view(name).astype(np.float64) - target.view(name).astype(np.float64)
        total += float(np.sum(d * d))
    return total


def matching_loss(
    g: Graph,
    student_final: dict,
    expert_start: NetworkParams,
    expert_target: NetworkParams,
    denom_eps: float,
) -> int:
    """Squared L2 gap to the target snapshot over the expert's own movement."""
    denom = _segment_gap(expert_start, expert_target)
    if denom < denom_eps:
        raise DegenerateSegmentError(
            f"degenerate expert segment: squared movement {denom:.3e} < {denom_eps:.3e}"
        )
    num = None
    for name, _, _ in expert_start.layout:
        diff = g.sub(student_final[name], g.constant(expert_target.view(name)))
        term = g.reduce_sum(g.mul(diff, diff))
        num = term if num is None else g.add(num, term)
    return g.mul(num, g.constant(1.0 / denom))


def build_meta_graph(
    spec,
    synth: SyntheticDataset,
    start: NetworkParams,
    target: NetworkParams,
    cfg: DistillConfig,
    dtype=np.float32,
    chunk_order=None,
):
    """Unroll the inner loop and the matching loss into one graph.

    Returns (g, sample_leaves, chunks, lr_leaf, loss_node); chunk i of the
    synthetic set binds to sample_leaves[i].  Inner steps cycle through the
    chunks; with at most FULL_BATCH_LIMIT samples there is one full-batch
    chunk.
    """
    n = synth.samples.shape[0]
    if n <= FULL_BATCH_LIMIT:
        chunks = [np.arange(n)]
    else:
        perm = np.asarray(chunk_order) if chunk_order is not None else np.arange(n)
        chunks = [perm[i : i + INNER_CHUNK] for i in range(0, n, INNER_CHUNK)]
    g = Graph(dtype)
    leaves = [g.leaf((len(c),) + synth.sample_shape) for c in chunks]
    lr_leaf = g.leaf(())
    params = {name: g.constant(start.view(name)) for name, _, _ in start.layout}
    for k in range(cfg.inner_steps):
        ci = k % len(chunks)
        params = inner_update(g, spec, params, leaves[ci], synth.labels[chunks[ci]], lr_leaf)
    loss = matching_loss(g, params, start, target, cfg.denom_eps)
    return g, leaves, chunks, lr_leaf, loss


# -- meta-optimization ----------------------------------------------------


@dataclass
class DistillState:
    synth: SyntheticDataset
    spec: object
    config: DistillConfig
    velocity_samples: np.ndarray = None
    velocity_lr: float = 0.0

    def __post_init__(self):
        if self.velocity_samples is None:
            self.velocity_samples = np.zeros_like(self.synth.samples)


def distill_step(state: DistillState, trajectory, rng):
    """One meta-iteration; mutates and returns the state plus the loss."""
    cfg, synth = state.config, state.synth
    for _ in range(RESAMPLE_LIMIT):
        t0, start = sample_start(trajectory, cfg.start_cap, rng, cfg.lookahead)
        target = trajectory.snapshots[t0 + cfg.lookahead]
        if _segment_gap(start, target) >= cfg.denom_eps:
            break
    else:
        raise DegenerateSegmentError(
            f"no usable expert segment after {RESAMPLE_LIMIT} draws "
            f"at iteration {synth.iteration}"
        )
    n = synth.samples.shape[0]
    chunk_order = rng.permutation(n) if n > FULL_BATCH_LIMIT else None
    g, leaves, chunks, lr_leaf, loss = build_meta_graph(
        state.spec, synth, start, target, cfg, np.float32, chunk_order
    )
    grads = backward(g, loss, leaves + [lr_leaf])
    bindings = {leaf: synth.samples[chunk] for leaf, chunk in zip(leaves, chunks)}
    bindings[lr_leaf] = np.float32(synth.inner_lr)
    vals = evaluate(g, bindings)
    loss_value = float(vals[loss])
    grad_samples = np.zeros_like(synth.samples)
    for leaf, chunk in zip(leaves, chunks):
        grad_samples[chunk] = vals[grads[leaf]]
    grad_lr = float(vals[grads[lr_leaf]])
    if not (np.isfinite(loss_value) and np.isfinite(grad_lr)) or not np.all(
        np.isfinite(grad_samples)
    ):
        raise DistillError(f"non-finite meta-gradient at iteration {synth.iteration}")

    state.velocity_samples = (
        cfg.meta_momentum * state.velocity_samples - cfg.lr_samples * grad_samples
    )
    synth.samples += state.velocity_samples
    state.velocity_lr = cfg.meta_momentum * state.velocity_lr - cfg.lr_inner * grad_lr
    synth.inner_lr = max(synth.inner_lr + state.velocity_lr, MIN_INNER_LR)
    synth.iteration += 1
    return state, loss_value


def buffer_digest(buffer) -> str:
    h = hashlib.sha256()
    for traj in buffer:
        for snap in traj.snapshots:
            h.update(snap.flat.tobytes())
    return h.hexdigest()[:16]


def distill(
    real: LabeledDataset, buffer, cfg: DistillConfig, spc: int, out_dir=None
):
    """Run the full meta-optimization.

    Returns (SyntheticDataset, loss history array).  With `out_dir` set,
    checkpoint packs land there every `checkpoint_every` iterations and the
    loss history is written as CSV at the end.
    """
    if not buffer:
        raise ValueError("expert buffer is empty")
    spec = buffer[0].spec
    if any(t.spec != spec for t in buffer[1:]):
        raise ValueError("trajectories disagree on the model spec")
    synth = init_synthetic(real, spc, seeding.derive(cfg.seed, "init-synth"), cfg.inner_lr_init)
    state = DistillState(synth, spec, cfg)
    digest = buffer_digest(buffer) if out_dir is not None else ""
    history = []
    for i in range(cfg.iterations):
        rng = seeding.generator(cfg.seed, "iter", i)
        traj = buffer[int(rng.integers(len(buffer)))]
        state, loss_value = distill_step(state, traj, rng)
        history.append((loss_value, synth.inner_lr))
        if (
            out_dir is not None
            and cfg.checkpoint_every > 0
            and (i + 1) % cfg.checkpoint_every == 0
        ):
            ds = synth.to_dataset({"buffer_digest": digest})
            save_pack(ds, f"{out_dir}/synthetic_iter{i + 1:06d}.wdpk")
    losses = np.array([h[0] for h in history])
    if out_dir is not None:
        with open(f"{out_dir}/distill_loss.csv", "w") as f:
            f.write("iteration,loss,inner_lr\n")
            for i, (loss_value, lr) in enumerate(history):
                f.write(f"{i},{loss_value!r},{lr!r}\n")
    return synth, losses
