"""Command-line entry point: ``retr3d <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..datasets import load_pix3d_manifest, load_shapenet_manifest, validate_manifest, write_toy_dataset
from ..model import PRESETS, count_params
from .ablation import format_ablation, run_ablation
from .checkpoint import load_checkpoint
from .config import resolve
from .evaluate import TABLE2_VIEWS, evaluate, format_sweep, multi_view_cross_table, sweep
from .predict import predict
from .train import make_source, train

log = logging.getLogger("retr3d")


def _views(text: str):
    return [int(v) for v in text.split(",") if v]


def _add_config(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: small)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. train.learning_rate=1e-3 (repeatable)")


def _ckpt_experiment(path, args):
    ckpt = load_checkpoint(path)
    return ckpt, resolve(args.config, args.overrides, base=ckpt.config)


def cmd_preprocess(args):
    exp = resolve(args.config, args.overrides, args.preset)
    d = exp.data
    if d.kind == "toy":
        print("toy data is generated in memory; nothing to validate")
        return 0
    if d.kind == "pix3d":
        parts = {"test": load_pix3d_manifest(d.root)}
    else:
        parts = {s: load_shapenet_manifest(d.root, s, d.split_dir) for s in ("train", "val", "test")}
    bad = 0
    for split, records in parts.items():
        problems = validate_manifest(records, d.resolution)
        bad += len(problems)
        print(f"{split}: {len(records)} records, {len(problems)} problems")
        for msg in problems[: args.max_problems]:
            print("  " + msg)
    return 1 if bad else 0


def cmd_train(args):
    exp = resolve(args.config, args.overrides, args.preset)
    source = make_source(exp, "train")
    if exp.model.head == "vqvae":
        from .twostage import train_two_stage

        path = train_two_stage(exp, source, args.out, args.stage1_steps or exp.train.max_steps, exp.train.max_steps)
        print(path)
        return 0
    for path in train(exp, source, args.out, resume=args.resume, device=args.device):
        print(path)
    return 0


def cmd_eval(args):
    ckpt, exp = _ckpt_experiment(args.checkpoint, args)
    source = make_source(exp, args.split)
    report = evaluate(ckpt, source, args.views or exp.eval.views, args.threshold or exp.eval.threshold, exp.eval.seed)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args):
    views = _views(args.views)
    first, exp = _ckpt_experiment(args.checkpoints[0], args)
    source = make_source(exp, args.split)
    threshold = args.threshold or exp.eval.threshold
    if len(args.checkpoints) == 1:
        reports = sweep(first, source, views, threshold=threshold, seed=exp.eval.seed)
        text = format_sweep(reports, Path(args.checkpoints[0]).stem)
        payload = [r.to_dict() for r in reports]
    else:
        ckpts = {}
        for path in args.checkpoints:
            c = load_checkpoint(path)
            ckpts[c.experiment.train.views_per_sample] = c
        table = multi_view_cross_table(ckpts, source, views, threshold, exp.eval.seed)
        text = table.to_markdown()
        payload = {"train_views": table.train_views, "eval_views": table.eval_views, "cells": table.cells}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(text)
    return 0


def cmd_ablate(args):
    exp = resolve(args.config, args.overrides, args.preset)
    source = make_source(exp, "train")
    eval_source = make_source(exp, args.split) if exp.data.kind != "toy" else source
    report = run_ablation(args.setup, exp, source, args.out, eval_source,
                          resnet_weights=args.resnet_weights, stage1_steps=args.stage1_steps)
    print(format_ablation([(args.setup, report)]))
    Path(args.out, f"setup{args.setup}", "report.json").write_text(report.to_json() + "\n")
    return 0


def cmd_predict(args):
    out = predict(args.checkpoint, args.images, args.out, args.views, args.threshold, args.sidecar)
    print(out)
    return 0


def cmd_toy_data(args):
    ids = write_toy_dataset(args.out, args.n, args.seed, args.resolution, args.views, args.size)
    print(f"wrote {len(ids)} objects to {args.out}")
    return 0


def cmd_params(args):
    exp = resolve(args.config, args.overrides, args.preset)
    print(count_params(exp.model))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="retr3d", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("preprocess", help="build and validate dataset manifests")
    _add_config(p)
    p.add_argument("--max-problems", type=int, default=20)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--device")
    p.add_argument("--stage1-steps", type=int, help="VQ-VAE steps when model.head=vqvae")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--views", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="multi-view table (one checkpoint) or train/eval cross table (several)")
    _add_config(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--views", default=",".join(map(str, TABLE2_VIEWS)))
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and evaluate one ablation setup")
    _add_config(p)
    p.add_argument("--setup", type=int, required=True, choices=range(0, 7))
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--resnet-weights")
    p.add_argument("--stage1-steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="reconstruct a binvox file from images")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sidecar", action="store_true", help="also save the probability field as .npy")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("toy-data", help="write the procedural toy dataset in ShapeNet layout")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("params", help="print the trainable-parameter count of a configuration")
    _add_config(p)
    p.set_defaults(func=cmd_params)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
