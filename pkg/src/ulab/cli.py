"""Command-line entry point: ``ulab <subcommand> --config exp.json [--seed S] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import harness
from .attacks import group_logits, mia_nn_report, mia_nn_report_from_logits, read_logit_csv
from .datasets import split_forget
from .errors import ConfigError, DivergenceError, FormatError, UsageError
from .nn import atomic_write_bytes, eval_accuracy, load_model, save_model
from .trw import similarity_scores
from .unlearn import train_original, unlearn

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    return [int(v) for v in _floats(text)]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment JSON file")
    common.add_argument("--seed", type=int, help="run this seed only")
    common.add_argument("--out", help="output directory (overrides outputDir)")
    common.add_argument("--jobs", type=int, default=1, help="parallel seeds")

    p = argparse.ArgumentParser(prog="ulab", description="class unlearning experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full method comparison -> results.csv")
    sub.add_parser("train", parents=[common], help="train and save the original model")
    u = sub.add_parser("unlearn", parents=[common], help="apply one method to a saved model")
    u.add_argument("--model", required=True)
    u.add_argument("--method", required=True, help="method name from the config's methods")
    a = sub.add_parser("attack", parents=[common], help="MIA-NN report")
    a.add_argument("--model", help="target model file")
    a.add_argument("--retrain", nargs="+", default=[], help="retrain model files")
    a.add_argument("--logits", help="target logit CSV (instead of --model)")
    a.add_argument("--retrain-logits", nargs="+", default=[], help="retrain logit CSVs")
    e = sub.add_parser("eval", parents=[common], help="accuracies, confusion and reassignment")
    e.add_argument("--model", required=True)
    sub.add_parser("toy", parents=[common], help="decision-region grids")
    b = sub.add_parser("ablate", parents=[common], help="TRW over a beta grid")
    b.add_argument("--betas", type=_floats, default=[0.0, 5.0, 10.0, 20.0])
    m = sub.add_parser("multiclass", parents=[common], help="forget growing class sets")
    m.add_argument("--counts", type=_ints, default=[1, 2])
    return p


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.out:
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _write_json(path, doc):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def _split(cfg, seed):
    train, test = harness.load_data(cfg, seed)
    return train, split_forget(train, test, cfg.forget_classes)


def _report_rows(rows) -> int:
    for r in rows:
        if r.error:
            print(f"{r.method} seed={r.seed}: ERROR {r.error}", file=sys.stderr)
    sys.stdout.write(harness.results_csv(rows))
    return EXIT_DIVERGED if harness.all_diverged(rows) else EXIT_OK


def cmd_run(args, cfg):
    return _report_rows(harness.run_experiment(cfg, jobs=args.jobs))


def cmd_ablate(args, cfg):
    return _report_rows(harness.ablate_beta(cfg, args.betas, jobs=args.jobs))


def cmd_multiclass(args, cfg):
    return _report_rows(harness.run_multiclass(cfg, args.counts, jobs=args.jobs))


def cmd_toy(args, cfg):
    summary = harness.emit_toy_boundary(cfg, jobs=args.jobs)
    print(json.dumps(summary["mean"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg):
    seed = cfg.seeds[0]
    train, _ = _split(cfg, seed)
    tc = dataclasses.replace(cfg.training, seed=seed)
    model = train_original(train, cfg.architecture, tc)
    path = os.path.join(cfg.output_dir, "original.ulab")
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_model(model, path)
    print(path)
    return EXIT_OK


def cmd_unlearn(args, cfg):
    seed = cfg.seeds[0]
    matches = [m for m in cfg.methods if m.method == args.method]
    if not matches:
        raise ConfigError(f"method {args.method!r} not in the config's methods")
    ucfg = dataclasses.replace(matches[0], seed=seed)
    model = load_model(args.model)
    _, split = _split(cfg, seed)
    profiles = {f: similarity_scores(model, f) for f in cfg.forget_classes}
    if ucfg.method == "retrain":
        tc = cfg.training
        ucfg = dataclasses.replace(ucfg, epochs=tc.epochs, learning_rate=tc.learning_rate,
                                   batch_size=tc.batch_size)
    result = unlearn(model, split, ucfg, profiles, arch=cfg.architecture)
    if not cfg.record_timing:
        result.wall_clock_seconds = None
    result.info.pop("targets", None)
    os.makedirs(cfg.output_dir, exist_ok=True)
    result.save(cfg.output_dir, ucfg.method)
    print(os.path.join(cfg.output_dir, f"{ucfg.method}.ulab"))
    return EXIT_OK


def cmd_attack(args, cfg):
    seed = cfg.seeds[0]
    reports = {}
    if args.logits:
        if not args.retrain_logits:
            raise UsageError("--logits needs --retrain-logits")
        k = cfg.architecture[-1]
        _, labels, logits = read_logit_csv(args.logits)
        target = group_logits(labels, logits, k)
        refs = [group_logits(*read_logit_csv(p)[1:], k) for p in args.retrain_logits]
        retained = [c for c in range(k) if c not in cfg.forget_classes]
        for f in cfg.forget_classes:
            reports[str(f)] = mia_nn_report_from_logits(target, refs, f, retained,
                                                        cfg.forget_classes, seed).to_dict()
    else:
        if not args.model or not args.retrain:
            raise UsageError("attack needs --model and --retrain (or --logits/--retrain-logits)")
        _, split = _split(cfg, seed)
        target = load_model(args.model)
        refs = [load_model(p) for p in args.retrain]
        for f in cfg.forget_classes:
            reports[str(f)] = mia_nn_report(target, refs, split, f, seed).to_dict()
    _write_json(os.path.join(cfg.output_dir, "attack.json"), reports)
    print(json.dumps(reports, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg):
    seed = cfg.seeds[0]
    _, split = _split(cfg, seed)
    model = load_model(args.model)
    rt, ft = split.retain_test, split.forget_test
    cm = harness.confusion_matrix(model, split.test_by_class)
    doc = {"acc_r": eval_accuracy(model, rt.features, rt.labels),
           "acc_f": eval_accuracy(model, ft.features, ft.labels),
           "confusion": cm.tolist(),
           "reassignment": {str(f): [{"class": c, "count": int(cm[f, c]), "fraction": frac}
                                     for c, frac in harness.reassignment_report(
                                         model, split.test_by_class[f])]
                            for f in cfg.forget_classes}}
    _write_json(os.path.join(cfg.output_dir, "eval.json"), doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "train": cmd_train, "unlearn": cmd_unlearn, "attack": cmd_attack,
            "eval": cmd_eval, "toy": cmd_toy, "ablate": cmd_ablate,
            "multiclass": cmd_multiclass}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
