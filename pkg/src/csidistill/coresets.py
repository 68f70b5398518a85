"""Classical per-class subset selectors used as distillation baselines.

All four methods pick `spc` real samples per class so the result has the
same class-balanced shape as a learned synthetic set.  Selection runs on
flattened preprocessed features with Euclidean distance.
"""

from dataclasses import dataclass

import numpy as np

from . import seeding
from .data import LabeledDataset

METHODS = ("random", "kmeans", "kcenter", "herding")

KMEANS_MAX_ITERS = 100
KMEANS_SHIFT_TOL = 1e-6


@dataclass
class CoresetResult:
    method: str
    indices: list
    spc: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown coreset method {self.method!r}")
        if self.spc < 1:
            raise ValueError("spc must be positive")
        self.indices = [int(i) for i in self.indices]
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("coreset indices must be distinct")

    def validate(self, ds: LabeledDataset):
        """Check the per-class contract against the source dataset."""
        c = ds.manifest.class_count
        if len(self.indices) != c * self.spc:
            raise ValueError(
                f"{len(self.indices)} indices for {c} classes at spc {self.spc}"
            )
        got = ds.labels[np.asarray(self.indices)]
        want = np.repeat(np.arange(c), self.spc)
        if not np.array_equal(got, want):
            raise ValueError("selected labels are not class-major balanced")


def feature_embed(ds: LabeledDataset) -> np.ndarray:
    """Per-sample flat float64 vectors; identity up to reshape."""
    return ds.samples.reshape(ds.samples.shape[0], -1).astype(np.float64)


def _per_class(ds, spc, pick):
    """Run `pick(local_features, class_id) -> local positions` per class."""
    feats = feature_embed(ds)
    out = []
    for c in range(ds.manifest.class_count):
        idx = ds.class_indices(c)
        if idx.size < spc:
            raise ValueError(f"class {c} has {idx.size} samples, need {spc}")
        local = pick(feats[idx], c)
        out.extend(int(idx[j]) for j in local)
    return out


def random_select(ds: LabeledDataset, spc: int, seed: int) -> CoresetResult:
    def pick(x, c):
        rng = seeding.generator(seed, "random", c)
        return np.sort(rng.choice(x.shape[0], size=spc, replace=False))

    return CoresetResult("random", _per_class(ds, spc, pick), spc)


def _sq_dists(x, point):
    d = x - point
    return np.einsum("ij,ij->i", d, d)


def _kmeans_pp(x, k, rng):
    cent = np.empty((k, x.shape[1]))
    cent[0] = x[int(rng.integers(x.shape[0]))]
    d2 = _sq_dists(x, cent[0])
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
        else:
            probs = np.full(x.shape[0], 1.0 / x.shape[0])
        cent[j] = x[int(rng.choice(x.shape[0], p=probs))]
        d2 = np.minimum(d2, _sq_dists(x, cent[j]))
    return cent


def _lloyd(x, cent):
    for _ in range(KMEANS_MAX_ITERS):
        dists = np.array([_sq_dists(x, c) for c in cent])
        assign = np.argmin(dists, axis=0)
        new = cent.copy()
        for j in range(cent.shape[0]):
            members = x[assign == j]
            if members.shape[0]:
                new[j] = members.mean(axis=0)
            # empty cluster keeps its previous centroid
        shift = np.sqrt(((new - cent) ** 2).sum(axis=1)).max()
        cent = new
        if shift < KMEANS_SHIFT_TOL:
            break
    return cent


def _nearest_unused(x, cent):
    used = set()
    chosen = []
    for c in cent:
        # stable sort makes ties resolve to the lowest index
        for cand in np.argsort(_sq_dists(x, c), kind="stable"):
            if int(cand) not in used:
                used.add(int(cand))
                chosen.append(int(cand))
                break
    return chosen


def kmeans_select(ds: LabeledDataset, spc: int, seed: int) -> CoresetResult:
    def pick(x, c):
        rng = seeding.generator(seed, "kmeans", c)
        cent = _lloyd(x, _kmeans_pp(x, spc, rng))
        return _nearest_unused(x, cent)

    return CoresetResult("kmeans", _per_class(ds, spc, pick), spc)


def kcenter_select(ds: LabeledDataset, spc: int, seed: int) -> CoresetResult:
    """Greedy farthest-first cover; `seed` is unused (method is deterministic)."""

    def pick(x, c):
        first = int(np.argmin(_sq_dists(x, x.mean(axis=0))))
        chosen = [first]
        mind = _sq_dists(x, x[first])
        while len(chosen) < spc:
            cand = mind.copy()
            cand[chosen] = -np.inf
            nxt = int(np.argmax(cand))
            chosen.append(nxt)
            mind = np.minimum(mind, _sq_dists(x, x[nxt]))
        return chosen

    return CoresetResult("kcenter", _per_class(ds, spc, pick), spc)


def herding_select(ds: LabeledDataset, spc: int, seed: int) -> CoresetResult:
    """Greedy mean matching; `seed` is unused (method is deterministic)."""

    def pick(x, c):
        mu = x.mean(axis=0)
        total = np.zeros(x.shape[1])
        used = np.zeros(x.shape[0], dtype=bool)
        chosen = []
        for k in range(1, spc + 1):
            errs = np.linalg.norm((total + x) / k - mu, axis=1)
            errs[used] = np.inf
            nxt = int(np.argmin(errs))
            used[nxt] = True
            chosen.append(nxt)
            total += x[nxt]
        return chosen

    return CoresetResult("herding", _per_class(ds, spc, pick), spc)


_SELECTORS = {
    "random": random_select,
    "kmeans": kmeans_select,
    "kcenter": kcenter_select,
    "herding": herding_select,
}


def select(method: str, ds: LabeledDataset, spc: int, seed: int) -> CoresetResult:
    if method not in _SELECTORS:
        raise ValueError(f"unknown coreset method {method!r}")
    return _SELECTORS[method](ds, spc, seed)
