"""Command-line workflows: ``genlora <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad arguments, config, files),
2 runtime failure (training divergence, failed gradient check, I/O errors).

Each command writes only to the paths it is given. A checkpoint or report
at ``X`` gets two sidecars, ``X.config.txt`` (the resolved config) and,
for training commands, ``X.log.jsonl`` (per-step losses).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import trainer
from .checkpoint import load_checkpoint, load_dataset, model_config, save_checkpoint, save_dataset
from .checks import check_gradients
from .config import RunConfig, load_config
from .data import DEFAULT_GENERATORS, DatasetSpec, build_dataset
from .errors import ConfigError, DataError, GenLoraError, ValidationError
from .lora import LoraHub
from .metrics import evaluate
from .model import Detector


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; the contract here is 1
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _sidecar(path, suffix):
    p = Path(path)
    return p.with_name(p.name + suffix)


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _write_logs(path, logs):
    lines = []
    for stage, log in logs.items():
        lines += [json.dumps({"stage": stage, **r}) + "\n" for r in log.records]
    _write_text(_sidecar(path, ".log.jsonl"), "".join(lines))


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _check_out_dir(path):
    parent = Path(path).parent
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {parent}")


def _config(args, base=None):
    if getattr(args, "config", None):
        return load_config(args.config)
    return base if base is not None else RunConfig()


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    run = _config(args)
    k = args.k if args.k is not None else run.k
    seed = args.seed if args.seed is not None else run.seed
    names = args.generators.split(",") if args.generators else list(DEFAULT_GENERATORS)[:k]
    if len(names) != k:
        raise ConfigError(f"--k {k} but {len(names)} generator names given")
    unknown = [n for n in names if n not in DEFAULT_GENERATORS]
    if unknown:
        raise ConfigError(f"unknown generator(s) {unknown}; known: {list(DEFAULT_GENERATORS)}")
    run = run.with_overrides(k=k, seed=seed)
    gens = {n: replace(DEFAULT_GENERATORS[n], amplitude=run.fingerprint_amplitude) for n in names}
    spec = DatasetSpec(gens, run.n_real_train, run.n_fake_train, run.n_real_test, run.n_fake_test,
                       run.image_size, run.channels)
    dataset = build_dataset(spec, seed)
    info = {"seed": seed, "n_real_train": spec.n_real_train, "n_fake_train": spec.n_fake_train,
            "n_real_test": spec.n_real_test, "n_fake_test": spec.n_fake_test,
            "image_size": spec.image_size, "channels": spec.channels}
    info.update({f"fingerprint.{n}": fp.describe() for n, fp in gens.items()})
    save_dataset(dataset, args.out, info)
    run.write(args.out)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test samples "
          f"({', '.join(names)}) to {args.out}")


def cmd_train_stage1(args):
    run = _config(args)
    dataset = load_dataset(args.data)
    _check_out_dir(args.out)
    backbone = trainer.make_backbone(run)
    res = trainer.specialize(run, dataset, args.generator, backbone)
    model = Detector(backbone, LoraHub(run.vit().slots, [res.branch]), res.head)
    save_checkpoint(model, args.out, run)
    _write_text(_sidecar(args.out, ".config.txt"), run.to_text())
    _write_logs(args.out, {f"stage1.{args.generator}": res.log})
    s = res.log.summary()
    print(f"stage 1 [{args.generator}]: {s['steps']} steps, loss {s['first_epoch_loss']:.4f} -> "
          f"{s['last_epoch_loss']:.4f}; wrote {args.out}")


def _join_branches(paths, run):
    models = [load_checkpoint(p) for p in paths]
    first = models[0]
    digest = first.backbone.digest()
    for p, m in zip(paths, models):
        if m.backbone.config != run.vit():
            raise ConfigError(f"{p}: backbone settings differ from the run config")
        if m.backbone.digest() != digest:
            raise ConfigError(f"{p}: backbone weights differ from {paths[0]}")
        if m.k != 1:
            raise ConfigError(f"{p}: expected a single-branch stage-1 checkpoint, found {m.k} branches")
    branches = [m.hub.branches[0] for m in models]
    names = [b.name for b in branches]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate generator branches: {names}")
    return Detector(first.backbone, LoraHub(run.vit().slots, branches), None)


def cmd_train_stage2(args):
    run = _config(args)
    paths = [p for p in args.branches.split(",") if p]
    if not paths:
        raise ConfigError("--branches needs at least one checkpoint")
    dataset = load_dataset(args.data)
    _check_out_dir(args.out)
    model = _join_branches(paths, run)
    missing = [n for n in model.names if n not in dataset.names]
    if missing:
        raise DataError(f"dataset {args.data} has no samples for branch(es) {missing}")
    run = run.with_overrides(k=model.k)
    res = trainer.train_stage2(dataset.train, model, trainer.stage2_config(run), names=dataset.names)
    save_checkpoint(res.model, args.out, run)
    _write_text(_sidecar(args.out, ".config.txt"), run.to_text())
    _write_logs(args.out, {"stage2": res.log})
    s = res.log.summary()
    print(f"stage 2 [{', '.join(model.names)}]: {s['steps']} steps, loss "
          f"{s['first_epoch_loss']:.4f} -> {s['last_epoch_loss']:.4f}; wrote {args.out}")


def cmd_add_generator(args):
    model = load_checkpoint(args.model)
    run = _config(args, model_config(model))
    dataset = load_dataset(args.data)
    _check_out_dir(args.out)
    if args.generator:
        name = args.generator
    else:
        new = [n for n in dataset.names if n not in model.names]
        if len(new) != 1:
            raise DataError(f"cannot infer the new generator: dataset has {dataset.names}, "
                            f"model has {model.names}; pass --generator")
        name = new[0]
    extended, logs = trainer.extend_with_generator(model, dataset, name, run)
    run = run.with_overrides(k=extended.k)
    save_checkpoint(extended, args.out, run)
    _write_text(_sidecar(args.out, ".config.txt"), run.to_text())
    _write_logs(args.out, logs)
    print(f"added {name!r}: branches now {extended.names}; wrote {args.out}")


def cmd_eval(args):
    model = load_checkpoint(args.model)
    run = model_config(model)
    dataset = load_dataset(args.data)
    _check_out_dir(args.report)
    samples = getattr(dataset, args.split)
    threshold = args.threshold if args.threshold is not None else run.threshold
    report = evaluate(model, samples, threshold, run.eval_batch_size, names=dataset.names)
    report["split"] = args.split
    _write_text(args.report, _dump_json(report))
    _write_text(_sidecar(args.report, ".config.txt"), run.to_text())
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(f"acc {fmt(report['acc'])}  ap {fmt(report['ap'])}  auc {fmt(report['auc'])}  "
          f"eer {fmt(report['eer'])}; wrote {args.report}")


def cmd_gradcheck(args):
    run = _config(args)
    result = check_gradients(run, batch=args.batch, seed=args.seed, n_coords=args.coords)
    if args.report:
        _check_out_dir(args.report)
        _write_text(args.report, _dump_json(result))
    print(f"stage 1 max rel error {result['stage1']['max_rel_error']:.3e}; "
          f"stage 2 max rel error {result['stage2']['max_rel_error']:.3e}; "
          f"{'PASS' if result['passed'] else 'FAIL'} ({result['seconds']:.1f}s)")
    return 0 if result["passed"] else 2


def cmd_ablate(args):
    run = _config(args)
    dataset = load_dataset(args.data)
    specs = [s for s in args.flags.split(",") if s]
    if not specs:
        raise ConfigError("--flags needs at least one variant")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    if args.report:
        _check_out_dir(args.report)
    seeds = [run.seed + i for i in range(args.seeds)]
    result = trainer.run_ablation(run, dataset, specs, seeds)
    for v, m in result["mean"].items():
        print(f"{v:>24s}  acc {m['acc']:.4f}  ap {m['ap']:.4f}  auc {m['auc']:.4f}  eer {m['eer']:.4f}")
    if args.report:
        _write_text(args.report, _dump_json(result))
        _write_text(_sidecar(args.report, ".config.txt"), run.to_text())


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="genlora", description="Generator-aware LoRA detector workflows.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-data", help="build a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--generators", help="comma-separated names (default: the first K built-ins)")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train-stage1", help="specialize one branch")
    s.add_argument("--data", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_stage1)

    s = sub.add_parser("train-stage2", help="train router and head over frozen branches")
    s.add_argument("--data", required=True)
    s.add_argument("--branches", required=True, help="comma-separated stage-1 checkpoints")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_stage2)

    s = sub.add_parser("add-generator", help="add a branch for a new generator")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--generator")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_add_generator)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--threshold", type=float)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of both objectives")
    s.add_argument("--config")
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=32)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train and score ablation variants over seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--flags", required=True,
                   help="comma-separated variants: presets (core, k_sweep, strategy), core rows, "
                        "k=N, or flags joined by '+'")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--config")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        code = args.fn(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GenLoraError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
