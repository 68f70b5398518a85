"""Pipeline front end: generate, train teachers, distill, select, evaluate."""

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .coresets import select
from .data import (
    LabeledDataset,
    PackError,
    load_pack,
    preprocess,
    save_pack,
    split,
    subset,
    synth_csi,
)
from .distill import DistillError, distill
from .evaluate import (
    EvalConfig,
    EvalReport,
    cross_matrix,
    evaluate,
    evaluate_set,
    render_table,
    report_csv,
    samples_per_class,
    train_student,
)
from .models import ModelSpec
from .trajectories import (
    BufferError,
    TeacherConfig,
    TrainingError,
    load_trajectory,
    save_trajectory,
    train_teacher,
)


def _emit(command: str, **fields):
    line = {"command": command, "status": "ok"}
    line.update(fields)
    print(json.dumps(line, sort_keys=True))


def _train_pack(cfg):
    return cfg.out_dir / "data" / "train.wdpk"


def _test_pack(cfg):
    return cfg.out_dir / "data" / "test.wdpk"


def _buffer_dir(cfg):
    return cfg.out_dir / "buffer"


def _distill_dir(cfg, kind, spc):
    return cfg.out_dir / "distill" / kind / f"spc{spc}"


def _coreset_pack(cfg, method, spc):
    return cfg.out_dir / "coreset" / f"{method}_spc{spc}.wdpk"


def _load_required(path, what):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing {what}: {path}")
    return load_pack(path)


def _load_buffer(cfg):
    bdir = _buffer_dir(cfg)
    paths = sorted(bdir.glob("teacher_*.wdtb"))
    if not paths:
        raise FileNotFoundError(f"missing expert buffer: no teacher_*.wdtb under {bdir}")
    return [load_trajectory(p) for p in paths]


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args):
    d = cfg.section("dataset")
    if d["pack"]:
        full = _load_required(d["pack"], "dataset pack")
    else:
        full = synth_csi(cfg.multipath(), d["samples_per_class"], cfg.dataset_seed())
    train_raw, test_raw = split(full, d["train_fraction"], cfg.split_seed())
    pcfg = cfg.preprocess_cfg()
    train = preprocess(train_raw, pcfg, train_raw)
    test = preprocess(test_raw, pcfg, train_raw)
    _train_pack(cfg).parent.mkdir(parents=True, exist_ok=True)
    save_pack(train, _train_pack(cfg))
    save_pack(test, _test_pack(cfg))
    _emit(
        "gen-data",
        train=str(_train_pack(cfg)),
        test=str(_test_pack(cfg)),
        classes=full.manifest.class_count,
        train_size=train.samples.shape[0],
        test_size=test.samples.shape[0],
    )
    return 0


def _teacher_job(train_path, spec_dict, teacher_kwargs, out_path):
    train = load_pack(train_path)
    spec = ModelSpec.from_dict(spec_dict)
    traj = train_teacher(train, TeacherConfig(spec=spec, **teacher_kwargs))
    save_trajectory(traj, out_path)
    return str(out_path), float(traj.train_accuracies[-1])


def cmd_buffer(cfg: RunConfig, args):
    train = _load_required(_train_pack(cfg), "train pack")
    spec = cfg.model_spec(train.manifest.sample_shape)
    t = cfg.section("teacher")
    bdir = _buffer_dir(cfg)
    bdir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i in range(t["count"]):
        kwargs = {
            "epochs": t["epochs"],
            "batch_size": t["batch_size"],
            "lr": t["lr"],
            "momentum": t["momentum"],
            "seed": cfg.teacher_seed(i),
        }
        jobs.append(
            (str(_train_pack(cfg)), spec.to_dict(), kwargs, str(bdir / f"teacher_{i:03d}.wdtb"))
        )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_teacher_job, *zip(*jobs)))
    else:
        results = [_teacher_job(*job) for job in jobs]
    _emit(
        "buffer",
        teachers=[p for p, _ in results],
        final_train_accuracies=[a for _, a in results],
        model=spec.kind,
    )
    return 0


def cmd_distill(cfg: RunConfig, args):
    train = _load_required(_train_pack(cfg), "train pack")
    buffer = _load_buffer(cfg)
    kind = buffer[0].spec.kind
    outputs = []
    for spc in cfg.section("distill")["spc"]:
        out = _distill_dir(cfg, kind, spc)
        out.mkdir(parents=True, exist_ok=True)
        dcfg = cfg.distill_cfg(spc)
        synth, losses = distill(train, buffer, dcfg, spc, out_dir=out)
        final = out / "synthetic_final.wdpk"
        save_pack(synth.to_dataset({"method": "distill"}), final)
        outputs.append(
            {
                "spc": spc,
                "pack": str(final),
                "final_loss": float(losses[-1]) if losses.size else None,
                "inner_lr": synth.inner_lr,
            }
        )
    _emit("distill", model=kind, runs=outputs)
    return 0


def cmd_coreset(cfg: RunConfig, args):
    train = _load_required(_train_pack(cfg), "train pack")
    c = cfg.section("coreset")
    outputs = []
    for method in c["methods"]:
        for spc in c["spc"]:
            res = select(method, train, spc, cfg.coreset_seed(method, spc))
            res.validate(train)
            sub = subset(train, res.indices, f"coreset-{method}")
            sub.manifest.extra.update(
                {"method": method, "spc": spc, "indices": res.indices}
            )
            path = _coreset_pack(cfg, method, spc)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_pack(sub, path)
            outputs.append({"method": method, "spc": spc, "pack": str(path)})
    _emit("coreset", selections=outputs)
    return 0


def _eval_job(small_path, test_path, spec_dict, cfg_kwargs, seed):
    small = load_pack(small_path)
    test = load_pack(test_path)
    spec = ModelSpec.from_dict(spec_dict)
    cfg = EvalConfig(spec, **cfg_kwargs)
    return evaluate(train_student(small, cfg, seed), test, spec)


def _eval_one(small_path, test, ecfg, method, spc, jobs):
    if jobs > 1:
        args = [
            (str(small_path), test, ecfg.spec.to_dict(),
             {"epochs": ecfg.epochs, "lr": ecfg.lr, "momentum": ecfg.momentum,
              "batch_size": ecfg.batch_size, "repeats": ecfg.repeats,
              "seeds": ecfg.seeds},
             seed)
            for seed in ecfg.seeds
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_eval_job, *zip(*args)))
        return EvalReport(method, spc, ecfg.spec.kind, ecfg.seeds, tuple(accs))
    small = load_pack(small_path)
    test_ds = load_pack(test)
    return evaluate_set(small, test_ds, ecfg, method, spc)


def _eval_targets(cfg):
    """Yield (method, spc, pack path) for every configured small set."""
    e = cfg.section("eval")
    kind = cfg.section("model")["kind"]
    for target in e["targets"]:
        if target == "distill":
            for spc in cfg.section("distill")["spc"]:
                yield "distill", spc, _distill_dir(cfg, kind, spc) / "synthetic_final.wdpk"
        else:
            for spc in cfg.section("coreset")["spc"]:
                yield target, spc, _coreset_pack(cfg, target, spc)


def cmd_eval(cfg: RunConfig, args):
    test_path = _test_pack(cfg)
    _load_required(test_path, "test pack")
    train_path = _train_pack(cfg)
    reports = []
    for method, spc, pack in _eval_targets(cfg):
        if not Path(pack).is_file():
            raise FileNotFoundError(f"missing {method} set: {pack}")
        sample_shape = load_pack(pack).manifest.sample_shape
        for arch in cfg.section("eval")["architectures"]:
            spec = cfg.model_spec(sample_shape, kind=arch)
            ecfg = cfg.eval_cfg(spec, method, spc)
            reports.append(_eval_one(pack, str(test_path), ecfg, method, spc, args.jobs))
    if cfg.section("eval")["include_whole"]:
        train = _load_required(train_path, "train pack")
        spc = samples_per_class(train)
        for arch in cfg.section("eval")["architectures"]:
            spec = cfg.model_spec(train.manifest.sample_shape, kind=arch)
            ecfg = cfg.eval_cfg(spec, "whole", spc)
            reports.append(_eval_one(train_path, str(test_path), ecfg, "whole", spc, args.jobs))
    edir = cfg.out_dir / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    report_csv(reports, edir / "results.csv")
    (edir / "table.txt").write_text(render_table(reports) + "\n")
    _emit(
        "eval",
        csv=str(edir / "results.csv"),
        table=str(edir / "table.txt"),
        rows=len(reports),
        best=max(r.mean for r in reports),
    )
    return 0


def cmd_cross_eval(cfg: RunConfig, args):
    test = _load_required(_test_pack(cfg), "test pack")
    droot = cfg.out_dir / "distill"
    kinds = sorted(p.name for p in droot.iterdir() if p.is_dir()) if droot.is_dir() else []
    if not kinds:
        raise FileNotFoundError(f"missing distilled sets: no model dirs under {droot}")
    reports = []
    for spc in cfg.section("distill")["spc"]:
        producers = {}
        for kind in kinds:
            pack = _distill_dir(cfg, kind, spc) / "synthetic_final.wdpk"
            if pack.is_file():
                producers[f"distill-{kind}"] = load_pack(pack)
        rand_pack = _coreset_pack(cfg, "random", spc)
        if rand_pack.is_file():
            producers["random"] = load_pack(rand_pack)
        if not producers:
            raise FileNotFoundError(
                f"missing distilled sets for spc {spc} under {droot}"
            )
        shape = next(iter(producers.values())).manifest.sample_shape
        specs = [cfg.model_spec(shape, kind=a) for a in cfg.section("eval")["architectures"]]
        base = cfg.eval_cfg(specs[0], "cross", spc)
        matrix = cross_matrix(producers, specs, base, test)
        reports.extend(matrix[key] for key in sorted(matrix))
    edir = cfg.out_dir / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    report_csv(reports, edir / "cross_results.csv")
    (edir / "cross_table.txt").write_text(render_table(reports) + "\n")
    _emit(
        "cross-eval",
        csv=str(edir / "cross_results.csv"),
        table=str(edir / "cross_table.txt"),
        rows=len(reports),
    )
    return 0


def _read_reports(path):
    groups = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            key = (row["method"], int(row["spc"]), row["model"])
            groups.setdefault(key, []).append((int(row["seed"]), float(row["accuracy"])))
    return [
        EvalReport(m, spc, model, tuple(s for s, _ in rows), tuple(a for _, a in rows))
        for (m, spc, model), rows in groups.items()
    ]


def cmd_report(cfg: RunConfig, args):
    edir = cfg.out_dir / "eval"
    sections = []
    found = []
    for name, title in (("results.csv", "small-set accuracy"), ("cross_results.csv", "cross-architecture accuracy")):
        path = edir / name
        if path.is_file():
            found.append(str(path))
            sections.append(f"{title}\n\n{render_table(_read_reports(path))}")
    if not found:
        raise FileNotFoundError(f"missing evaluation results under {edir}")
    text = "\n\n".join(sections) + "\n"
    out = cfg.out_dir / "report.txt"
    out.write_text(text)
    print(text, end="")
    _emit("report", report=str(out), sources=found)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "buffer": cmd_buffer,
    "distill": cmd_distill,
    "coreset": cmd_coreset,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "report": cmd_report,
}


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csidistill",
        description="Dataset distillation pipeline for synthetic Wi-Fi sensing data.",
    )
    parser.add_argument("--config", help="TOML run configuration file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    parser.add_argument(
        "--jobs", type=_positive_int, default=1, help="parallel workers for independent tasks"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        cfg = RunConfig.load(args.config, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except (
        PackError,
        BufferError,
        TrainingError,
        DistillError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
