"""Dataset container, WDPK pack format, preprocessing, splitting, and a
synthetic multipath CSI generator.

The generator sums per-path phasors alpha_n * exp(-j*2*pi*f*d_n(t)/c) over a
subcarrier-by-time grid and emits the amplitude.  Path lengths follow
d_n(t) = d0_n + v_n*t + a_n*sin(2*pi*f_m*t) with d0 and v jittered per sample
from class-conditional ranges, so temporal frequency content carries the
class.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import seeding

C_LIGHT = 299_792_458.0
DEFAULT_BAND_HZ = 5.18e9

MAGIC = b"WDPK"
PACK_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.float64}


class PackError(ValueError):
    """Malformed or truncated pack file."""


@dataclass
class Manifest:
    class_count: int
    sample_shape: tuple
    split: str = "full"
    provenance: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_shape = tuple(int(d) for d in self.sample_shape)


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.samples.shape[0]
        if n < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.shape != (n,):
            raise ValueError(f"{self.labels.size} labels for {n} samples")
        c = self.manifest.class_count
        if self.labels.min() < 0 or self.labels.max() >= c:
            raise ValueError(f"labels outside [0, {c})")
        if self.samples.shape[1:] != self.manifest.sample_shape:
            raise ValueError(
                f"sample shape {self.samples.shape[1:]} does not match "
                f"manifest {self.manifest.sample_shape}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite elements")

    def __len__(self):
        return self.samples.shape[0]

    def class_indices(self, label) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


def subset(ds: LabeledDataset, indices, split_tag: str) -> LabeledDataset:
    idx = np.asarray(indices, dtype=np.int64)
    man = Manifest(
        ds.manifest.class_count,
        ds.manifest.sample_shape,
        split=split_tag,
        provenance=ds.manifest.provenance,
        extra=dict(ds.manifest.extra),
    )
    return LabeledDataset(ds.samples[idx].copy(), ds.labels[idx].copy(), man)


# -- synthetic CSI --------------------------------------------------------


@dataclass
class MultipathConfig:
    """Generator knobs.  Defaults give six separable activity classes."""

    classes: int = 6
    path_count: int = 5
    wavelength: float = C_LIGHT / DEFAULT_BAND_HZ
    subcarrier_count: int = 30
    subcarrier_spacing: float = 312.5e3
    time_steps: int = 64
    duration: float = 1.0
    attenuations: tuple = ()
    base_distance_range: tuple = (1.0, 1.01)
    speed_base: float = 0.3
    speed_step: float = 0.25
    speed_profile: tuple = ()
    speed_jitter: float = 0.1
    sway_amplitude: float = 0.05
    sway_freq: float = 0.8
    noise_std: float = 0.05
    fixed_base_distances: tuple = ()

    def __post_init__(self):
        if self.wavelength <= 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if self.path_count < 1:
            raise ValueError(f"path_count must be >= 1, got {self.path_count}")
        if self.classes < 1 or self.subcarrier_count < 1 or self.time_steps < 1:
            raise ValueError("classes, subcarrier_count, time_steps must be >= 1")
        if not self.attenuations:
            self.attenuations = tuple(0.8**n for n in range(self.path_count))
        self.attenuations = tuple(complex(a) for a in self.attenuations)
        if len(self.attenuations) != self.path_count:
            raise ValueError(
                f"{len(self.attenuations)} attenuations for {self.path_count} paths"
            )
        if any(abs(a) > 1 + 1e-12 for a in self.attenuations):
            raise ValueError("attenuation magnitudes must be <= 1")
        if self.fixed_base_distances and len(self.fixed_base_distances) != self.path_count:
            raise ValueError("fixed_base_distances length must equal path_count")
        if not self.speed_profile:
            # scatterers move at fixed fractions of the class speed
            self.speed_profile = tuple(
                np.round(np.linspace(0.25, 1.0, self.path_count), 4)
            )
        self.speed_profile = tuple(float(r) for r in self.speed_profile)
        if len(self.speed_profile) != self.path_count:
            raise ValueError("speed_profile length must equal path_count")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def freqs(self) -> np.ndarray:
        f0 = C_LIGHT / self.wavelength
        k = np.arange(self.subcarrier_count) - (self.subcarrier_count - 1) / 2.0
        return f0 + k * self.subcarrier_spacing

    def sample_shape(self):
        return (self.subcarrier_count, self.time_steps)

    def to_dict(self):
        d = {
            "classes": self.classes,
            "path_count": self.path_count,
            "wavelength": self.wavelength,
            "subcarrier_count": self.subcarrier_count,
            "subcarrier_spacing": self.subcarrier_spacing,
            "time_steps": self.time_steps,
            "duration": self.duration,
            "attenuations": [[a.real, a.imag] for a in self.attenuations],
            "base_distance_range": list(self.base_distance_range),
            "speed_base": self.speed_base,
            "speed_step": self.speed_step,
            "speed_profile": list(self.speed_profile),
            "speed_jitter": self.speed_jitter,
            "sway_amplitude": self.sway_amplitude,
            "sway_freq": self.sway_freq,
            "noise_std": self.noise_std,
        }
        if self.fixed_base_distances:
            d["fixed_base_distances"] = list(self.fixed_base_distances)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        att = d.get("attenuations", ())
        d["attenuations"] = tuple(
            complex(a[0], a[1]) if isinstance(a, (list, tuple)) else complex(a) for a in att
        )
        for key in ("base_distance_range", "fixed_base_distances", "speed_profile"):
            if key in d:
                d[key] = tuple(d[key])
        return MultipathConfig(**d)


def _sample_amplitude(cfg: MultipathConfig, label: int, rng) -> np.ndarray:
    n = cfg.path_count
    if cfg.fixed_base_distances:
        d0 = np.asarray(cfg.fixed_base_distances, dtype=np.float64)
    else:
        lo, hi = cfg.base_distance_range
        d0 = rng.uniform(lo, hi, size=n)
    v_class = cfg.speed_base + cfg.speed_step * label
    profile = np.asarray(cfg.speed_profile)
    v = v_class * profile * rng.uniform(1 - cfg.speed_jitter, 1 + cfg.speed_jitter, size=n)
    t = np.arange(cfg.time_steps) * (cfg.duration / cfg.time_steps)
    sway = np.sin(2 * np.pi * cfg.sway_freq * t)
    a_n = cfg.sway_amplitude * (np.arange(1, n + 1) / n)
    # d[path, time]
    d = d0[:, None] + v[:, None] * t[None, :] + a_n[:, None] * sway[None, :]
    atten = np.asarray(cfg.attenuations)
    phase = cfg.freqs()[None, :, None] * (d[:, None, :] / C_LIGHT)
    h = np.sum(atten[:, None, None] * np.exp(-2j * np.pi * phase), axis=0)
    amp = np.abs(h)
    if cfg.noise_std > 0:
        amp = amp + rng.normal(0.0, cfg.noise_std, size=amp.shape)
    return amp


def synth_csi(cfg: MultipathConfig, samples_per_class: int, seed: int) -> LabeledDataset:
    """Deterministic synthetic dataset, class-major sample order."""
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    shape = cfg.sample_shape()
    out = np.empty((cfg.classes * samples_per_class,) + shape, dtype=np.float32)
    labels = np.repeat(np.arange(cfg.classes), samples_per_class)
    for c in range(cfg.classes):
        for i in range(samples_per_class):
            rng = seeding.generator(seed, "sample", c, i)
            out[c * samples_per_class + i] = _sample_amplitude(cfg, c, rng)
    man = Manifest(
        cfg.classes,
        shape,
        split="full",
        provenance=f"synth_csi seed={seed} spc={samples_per_class} cfg={cfg.to_dict()}",
    )
    return LabeledDataset(out, labels, man)


# -- preprocessing --------------------------------------------------------


@dataclass
class PreprocessConfig:
    mad_k: float = 5.0
    eps_std: float = 1e-8

    def __post_init__(self):
        if self.mad_k <= 0 or self.eps_std <= 0:
            raise ValueError("mad_k and eps_std must be positive")


def preprocess(
    ds: LabeledDataset, cfg: PreprocessConfig, stats_from: LabeledDataset
) -> LabeledDataset:
    """Per-feature MAD clipping then z-scoring, stats from `stats_from`."""
    if ds.manifest.sample_shape != stats_from.manifest.sample_shape:
        raise ValueError(
            f"sample shapes differ: {ds.manifest.sample_shape} vs "
            f"{stats_from.manifest.sample_shape}"
        )
    src = stats_from.samples.astype(np.float64)
    med = np.median(src, axis=0)
    mad = np.median(np.abs(src - med), axis=0)
    half_width = cfg.mad_k * 1.4826 * mad
    src_clipped = np.clip(src, med - half_width, med + half_width)
    mean = src_clipped.mean(axis=0)
    std = src_clipped.std(axis=0)
    clipped = np.clip(ds.samples.astype(np.float64), med - half_width, med + half_width)
    safe = np.where(std < cfg.eps_std, 1.0, std)
    z = np.where(std < cfg.eps_std, 0.0, (clipped - mean) / safe)
    man = Manifest(
        ds.manifest.class_count,
        ds.manifest.sample_shape,
        split=ds.manifest.split,
        provenance=ds.manifest.provenance + f" | preprocessed mad_k={cfg.mad_k}",
        extra=dict(ds.manifest.extra),
    )
    return LabeledDataset(z.astype(ds.samples.dtype), ds.labels.copy(), man)


# -- pack file format -----------------------------------------------------


def save_pack(ds: LabeledDataset, path):
    dtype_code = 1 if ds.samples.dtype == np.float64 else 0
    samples = ds.samples.astype(_DTYPE_CODES[dtype_code], copy=False)
    shape = ds.manifest.sample_shape
    meta = json.dumps(
        {
            "split": ds.manifest.split,
            "provenance": ds.manifest.provenance,
            "extra": ds.manifest.extra,
        }
    ).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBB", PACK_VERSION, dtype_code, len(shape)))
        f.write(struct.pack(f"<{len(shape)}I", *shape))
        f.write(struct.pack("<QI", len(ds), ds.manifest.class_count))
        f.write(ds.labels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(samples).astype(samples.dtype.newbyteorder("<")).tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
    os.replace(tmp, path)


def _read_exact(f, count, what):
    buf = f.read(count)
    if len(buf) != count:
        raise PackError(f"truncated pack: expected {count} bytes for {what}, got {len(buf)}")
    return buf


def load_pack(path) -> LabeledDataset:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise PackError(f"{path}: not a pack file")
        version, dtype_code, rank = struct.unpack("<IBB", _read_exact(f, 6, "header"))
        if version != PACK_VERSION:
            raise PackError(f"unsupported pack version {version}, expected {PACK_VERSION}")
        if dtype_code not in _DTYPE_CODES:
            raise PackError(f"unknown dtype code {dtype_code}")
        shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "sample shape"))
        n, c = struct.unpack("<QI", _read_exact(f, 12, "counts"))
        labels = np.frombuffer(_read_exact(f, 4 * n, "labels"), dtype="<u4").astype(np.int64)
        dtype = _DTYPE_CODES[dtype_code]
        per = int(np.prod(shape))
        raw = _read_exact(f, n * per * dtype().itemsize, "samples")
        samples = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
        samples = samples.astype(dtype).reshape((n,) + shape)
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "manifest length"))
        meta = json.loads(_read_exact(f, meta_len, "manifest").decode("utf-8"))
    man = Manifest(
        c,
        shape,
        split=meta.get("split", "full"),
        provenance=meta.get("provenance", ""),
        extra=meta.get("extra", {}),
    )
    return LabeledDataset(samples, labels, man)


# -- splitting and per-class stats ----------------------------------------


def split(ds: LabeledDataset, train_fraction: float, seed: int):
    """Stratified split into (train, test); both non-empty per class."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_idx, test_idx = [], []
    for c in range(ds.manifest.class_count):
        idx = ds.class_indices(c)
        if idx.size < 2:
            raise ValueError(f"class {c} has {idx.size} samples, need >= 2 to split")
        k = int(round(train_fraction * idx.size))
        k = min(max(k, 1), idx.size - 1)
        perm = seeding.generator(seed, "split", c).permutation(idx.size)
        train_idx.extend(idx[perm[:k]])
        test_idx.extend(idx[perm[k:]])
    return (
        subset(ds, train_idx, "train"),
        subset(ds, test_idx, "test"),
    )


def class_stats(ds: LabeledDataset):
    """Per-class (count, mean) over samples; means in float64."""
    out = {}
    for c in range(ds.manifest.class_count):
        idx = ds.class_indices(c)
        if idx.size:
            out[c] = (int(idx.size), ds.samples[idx].astype(np.float64).mean(axis=0))
        else:
            out[c] = (0, np.zeros(ds.manifest.sample_shape))
    return out
