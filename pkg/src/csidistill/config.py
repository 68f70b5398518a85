"""TOML run configuration: defaults, dotted overrides, seed fan-out."""

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import seeding
from .data import MultipathConfig, PreprocessConfig
from .distill import DistillConfig
from .evaluate import EvalConfig
from .models import ModelSpec
from .trajectories import TeacherConfig


class ConfigError(Exception):
    pass


DEFAULTS = {
    "run": {"root_seed": 1234, "out_dir": "runs/default"},
    "dataset": {
        "pack": "",
        "classes": 6,
        "samples_per_class": 150,
        "train_fraction": 0.667,
        "path_count": 5,
        "subcarrier_count": 30,
        "time_steps": 64,
        "noise_std": 0.05,
        "speed_jitter": 0.1,
        "mad_k": 5.0,
    },
    "model": {"kind": "mlp", "hidden": [256, 256]},
    "teacher": {
        "count": 5,
        "epochs": 30,
        "lr": 0.01,
        "momentum": 0.0,
        "batch_size": 64,
    },
    "distill": {
        "spc": [10],
        "inner_steps": 16,
        "lookahead": 1,
        "start_cap": 15,
        "iterations": 2000,
        "lr_samples": 3.0,
        "lr_inner": 1e-4,
        "meta_momentum": 0.5,
        "inner_lr_init": 0.01,
        "checkpoint_every": 500,
    },
    "coreset": {
        "methods": ["random", "kmeans", "kcenter", "herding"],
        "spc": [10],
    },
    "eval": {
        "epochs": 150,
        "lr": 0.01,
        "momentum": 0.9,
        "batch_size": 64,
        "repeats": 5,
        "architectures": ["mlp"],
        "targets": ["distill", "random", "kmeans", "kcenter", "herding"],
        "include_whole": True,
    },
}


def _merge(defaults: dict, loaded: dict, prefix=""):
    out = {}
    for key, value in loaded.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        base = defaults[key]
        if isinstance(base, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a table")
            out[key] = _merge(base, value, f"{prefix}{key}.")
        else:
            out[key] = _coerce(base, value, f"{prefix}{key}")
    for key, base in defaults.items():
        if key not in out:
            out[key] = _merge(base, {}, f"{prefix}{key}.") if isinstance(base, dict) else base
    return out


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return list(value)
    return value


def parse_override(text: str):
    """Split one --set entry into (section, key, parsed value)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    dotted, raw = text.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {dotted!r} is not of the form section.key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return parts[0], parts[1], value


@dataclass
class RunConfig:
    raw: dict

    @staticmethod
    def load(path=None, overrides=()) -> "RunConfig":
        loaded = {}
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {p} does not exist")
            try:
                loaded = tomllib.loads(p.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from exc
        for text in overrides or ():
            section, key, value = parse_override(text)
            loaded.setdefault(section, {})[key] = value
        raw = _merge(DEFAULTS, loaded)
        cfg = RunConfig(raw)
        cfg._validate()
        return cfg

    def _validate(self):
        for section in ("distill", "coreset"):
            spcs = self.raw[section]["spc"]
            if not spcs or any(not isinstance(s, int) or s < 1 for s in spcs):
                raise ConfigError(f"{section}.spc entries must be positive integers")
        if self.raw["model"]["kind"] not in ("mlp", "cnn"):
            raise ConfigError("model.kind must be mlp or cnn")
        for arch in self.raw["eval"]["architectures"]:
            if arch not in ("mlp", "cnn"):
                raise ConfigError(f"unknown eval architecture {arch!r}")
        if self.raw["teacher"]["count"] < 1:
            raise ConfigError("teacher.count must be >= 1")

    # -- plain accessors ---------------------------------------------------

    @property
    def root_seed(self) -> int:
        return self.raw["run"]["root_seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["run"]["out_dir"])

    def section(self, name) -> dict:
        return self.raw[name]

    # -- seed fan-out ------------------------------------------------------

    def dataset_seed(self):
        return seeding.derive(self.root_seed, "dataset")

    def split_seed(self):
        return seeding.derive(self.root_seed, "split")

    def teacher_seed(self, index):
        return seeding.derive(self.root_seed, "teacher", index)

    def distill_seed(self, spc):
        return seeding.derive(self.root_seed, "distill", spc)

    def coreset_seed(self, method, spc):
        return seeding.derive(self.root_seed, "coreset", method, spc)

    def eval_seed(self, method, spc, arch):
        return seeding.derive(self.root_seed, "eval", method, spc, arch)

    # -- module config builders --------------------------------------------

    def multipath(self) -> MultipathConfig:
        d = self.raw["dataset"]
        return MultipathConfig(
            classes=d["classes"],
            path_count=d["path_count"],
            subcarrier_count=d["subcarrier_count"],
            time_steps=d["time_steps"],
            noise_std=d["noise_std"],
            speed_jitter=d["speed_jitter"],
        )

    def preprocess_cfg(self) -> PreprocessConfig:
        return PreprocessConfig(mad_k=self.raw["dataset"]["mad_k"])

    def model_spec(self, sample_shape, kind=None) -> ModelSpec:
        m = self.raw["model"]
        kind = kind or m["kind"]
        hidden = tuple(m["hidden"]) if kind == m["kind"] else ()
        if not hidden:
            return ModelSpec(kind, sample_shape, self.raw["dataset"]["classes"])
        return ModelSpec(kind, sample_shape, self.raw["dataset"]["classes"], hidden)

    def teacher_cfg(self, spec, index) -> TeacherConfig:
        t = self.raw["teacher"]
        return TeacherConfig(
            spec=spec,
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            momentum=t["momentum"],
            seed=self.teacher_seed(index),
        )

    def distill_cfg(self, spc) -> DistillConfig:
        d = self.raw["distill"]
        return DistillConfig(
            inner_steps=d["inner_steps"],
            lookahead=d["lookahead"],
            start_cap=d["start_cap"],
            iterations=d["iterations"],
            lr_samples=d["lr_samples"],
            lr_inner=d["lr_inner"],
            meta_momentum=d["meta_momentum"],
            inner_lr_init=d["inner_lr_init"],
            checkpoint_every=d["checkpoint_every"],
            seed=self.distill_seed(spc),
        )

    def eval_cfg(self, spec, method, spc) -> EvalConfig:
        e = self.raw["eval"]
        return EvalConfig.with_root(
            spec,
            self.eval_seed(method, spc, spec.kind),
            repeats=e["repeats"],
            epochs=e["epochs"],
            lr=e["lr"],
            momentum=e["momentum"],
            batch_size=e["batch_size"],
        )
