"""Train fresh students on small sets and measure test accuracy."""

from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .models import ModelSpec, NetworkParams, forward, init_params
from .trajectories import run_sgd

EVAL_BATCH = 256


@dataclass
class EvalConfig:
    spec: ModelSpec
    epochs: int = 150
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    repeats: int = 5
    seeds: tuple = ()

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if not self.seeds:
            self.seeds = tuple(
                seeding.derive(0, "eval", i) for i in range(self.repeats)
            )
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) != self.repeats:
            raise ValueError(f"{len(self.seeds)} seeds for {self.repeats} repeats")

    @staticmethod
    def with_root(spec, root_seed, repeats=5, **kw):
        """Fan a root seed out into one independent seed per repeat."""
        seeds = tuple(seeding.derive(root_seed, "eval", i) for i in range(repeats))
        return EvalConfig(spec, repeats=repeats, seeds=seeds, **kw)


@dataclass
class EvalReport:
    method: str
    spc: int
    model: str
    seeds: tuple
    accuracies: tuple
    mean: float = None
    std: float = None

    def __post_init__(self):
        self.accuracies = tuple(float(a) for a in self.accuracies)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.accuracies or len(self.accuracies) != len(self.seeds):
            raise ValueError("need one accuracy per seed")
        accs = np.asarray(self.accuracies)
        mean, std = float(accs.mean()), float(accs.std())
        if self.mean is None:
            self.mean = mean
        elif abs(self.mean - mean) > 1e-12:
            raise ValueError("stored mean does not match accuracies")
        if self.std is None:
            self.std = std
        elif abs(self.std - std) > 1e-12:
            raise ValueError("stored std does not match accuracies")


def train_student(small, cfg: EvalConfig, seed: int) -> NetworkParams:
    """Fresh init + SGD on a small set; works for real subsets and learned
    synthetic sets alike (anything with .samples and .labels)."""
    samples = np.ascontiguousarray(small.samples, dtype=np.float32)
    labels = np.asarray(small.labels)
    if samples.shape[1:] != cfg.spec.input_shape:
        raise ValueError(
            f"sample shape {samples.shape[1:]} does not match spec "
            f"{cfg.spec.input_shape}"
        )
    params = init_params(cfg.spec, seeding.derive(seed, "init"))
    run_sgd(
        samples,
        labels,
        cfg.spec,
        params,
        epochs=cfg.epochs,
        lr=cfg.lr,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        seed=seed,
    )
    return params


def evaluate(params: NetworkParams, test, spec: ModelSpec, batch_size=EVAL_BATCH) -> float:
    """Accuracy over the full test set, measured in deterministic batches."""
    samples = np.asarray(test.samples)
    labels = np.asarray(test.labels)
    if samples.shape[1:] != spec.input_shape:
        raise ValueError(
            f"sample shape {samples.shape[1:]} does not match spec {spec.input_shape}"
        )
    n = samples.shape[0]
    if n == 0:
        raise ValueError("empty test set")
    hits = 0
    for start in range(0, n, batch_size):
        logits = forward(spec, params, samples[start : start + batch_size])
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + batch_size]))
    return hits / n


def evaluate_set(small, test, cfg: EvalConfig, method: str, spc: int) -> EvalReport:
    """R independent train/measure repeats on one small set."""
    accs = [
        evaluate(train_student(small, cfg, seed), test, cfg.spec)
        for seed in cfg.seeds
    ]
    return EvalReport(method, spc, cfg.spec.kind, cfg.seeds, tuple(accs))


def samples_per_class(ds) -> int:
    spc = getattr(ds, "spc", None)
    if spc is not None:
        return int(spc)
    counts = np.bincount(np.asarray(ds.labels), minlength=ds.manifest.class_count)
    return int(round(float(counts.mean())))


def cross_matrix(producers: dict, eval_specs, cfg: EvalConfig, test) -> dict:
    """Train/evaluate every (producer set, evaluation architecture) pair.

    Returns {(producer_name, arch_kind): EvalReport} with shared seeds so the
    cells are paired comparisons.
    """
    out = {}
    for pname, ds in producers.items():
        for spec in eval_specs:
            cell_cfg = replace(cfg, spec=spec)
            out[(pname, spec.kind)] = evaluate_set(
                ds, test, cell_cfg, method=pname, spc=samples_per_class(ds)
            )
    return out


def report_csv(reports, path):
    with open(path, "w") as f:
        f.write("method,spc,model,seed,accuracy\n")
        for r in reports:
            for seed, acc in zip(r.seeds, r.accuracies):
                f.write(f"{r.method},{r.spc},{r.model},{seed},{acc!r}\n")


def render_table(reports) -> str:
    rows = [("method", "spc", "model", "accuracy")]
    rows += [
        (r.method, str(r.spc), r.model, f"{r.mean:.4f} +/- {r.std:.4f}")
        for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
