"""``sic`` command line: gen-data, train, explain, audit, bench.

Exit codes: 0 success, 1 usage, 2 invalid input (config, data, checkpoint),
3 runtime or I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import funnybirds as fb
from .audit import audit_axioms
from .bcos import default_backbone, encode_image
from .benchmark import SICAdapter, metric_suite
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .explain import explain_prediction, write_bundle
from .train import config_dict, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("sic")


class CommandFailed(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_split(data_dir: str, split: str) -> list:
    try:
        scenes = fb.load_scenes(data_dir, split)
    except FileNotFoundError as e:
        raise CommandFailed(str(e), EXIT_INVALID) from None
    if not scenes:
        raise CommandFailed(f"{data_dir}: no scenes in split {split!r}", EXIT_INVALID)
    return scenes


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if not 1 <= args.classes <= fb.CAPACITY:
        raise CommandFailed(f"--classes {args.classes} exceeds the codebook capacity: must be in [1, {fb.CAPACITY}]", EXIT_INVALID)
    if args.per_class < 1 or args.test_per_class < 0:
        raise CommandFailed("--per-class must be >= 1 and --test-per-class >= 0", EXIT_INVALID)
    train_s, test_s = fb.generate_split(args.classes, args.per_class, args.test_per_class, args.seed)
    try:
        fb.save_scenes(args.out, train_s + test_s)
    except OSError as e:
        raise CommandFailed(f"cannot write dataset to {args.out}: {e.strerror or e}", EXIT_RUNTIME) from None
    print(f"wrote {len(train_s)} train + {len(test_s)} test scenes ({args.classes} classes) to {args.out}")
    return EXIT_OK


def build_network(cfg: RunConfig):
    return default_backbone(np.random.default_rng(cfg.seed), channels=cfg.channels, latent_dim=cfg.latent_dim, B=cfg.B)


def run_training(cfg: RunConfig) -> dict:
    """Train from ``cfg`` and write model.sic, history.jsonl and report.json into ``cfg.out_dir``."""
    train_s = _load_split(cfg.data_dir, "train")
    C = fb.num_classes_in(train_s)
    test_s = fb.load_scenes(cfg.data_dir, "test")
    os.makedirs(cfg.out_dir, exist_ok=True)
    tcfg = cfg.train_config()
    t0 = time.perf_counter()
    hist_path = os.path.join(cfg.out_dir, "history.jsonl")
    with open(hist_path, "w", encoding="utf-8") as hist:

        def on_epoch(rec):
            hist.write(json.dumps(rec) + "\n")
            hist.flush()

        result = train(fb.to_dataset(train_s, C), build_network(cfg), tcfg, on_epoch=on_epoch)
    seconds = time.perf_counter() - t0
    ckpt = os.path.join(cfg.out_dir, "model.sic")
    save_checkpoint(ckpt, result.model, extra={"train_config": config_dict(tcfg)})
    report = {
        "num_classes": C,
        "n_train": len(train_s),
        "n_test": len(test_s),
        "train_accuracy": result.history[-1]["accuracy"] if result.history else None,
        "test_accuracy": evaluate(result.model, fb.to_dataset(test_s, C)) if test_s else None,
        "seconds": seconds,
        "checkpoint": ckpt,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()},
    }
    _write_json(os.path.join(cfg.out_dir, "report.json"), report)
    return report


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    report = run_training(cfg)
    acc = report["test_accuracy"]
    print(f"trained {report['num_classes']} classes in {report['seconds']:.1f}s; test accuracy {'n/a' if acc is None else f'{acc:.3f}'}")
    print(f"checkpoint: {report['checkpoint']}")
    return EXIT_OK


def read_image(path: str) -> np.ndarray:
    """PNG or .npy ([3,H,W], [H,W,3] or [6,H,W]) -> [6,H,W] float32."""
    if path.lower().endswith(".npy"):
        arr = np.load(path, allow_pickle=False)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[-1] == 3 and arr.shape[0] not in (3, 6):
        arr = arr.transpose(2, 0, 1)
    if arr.ndim == 3 and arr.shape[0] == 6:
        return np.ascontiguousarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return encode_image(arr)
    raise CommandFailed(f"{path}: expected a [3,H,W], [H,W,3] or [6,H,W] image, got shape {arr.shape}", EXIT_INVALID)


def cmd_explain(args) -> int:
    model, _ = load_checkpoint(args.model)
    img = read_image(args.image)
    if tuple(img.shape) != tuple(model.backbone.input_shape):
        raise CommandFailed(f"{args.image}: image shape {img.shape} does not match model input {tuple(model.backbone.input_shape)}", EXIT_INVALID)
    C = model.cfg.num_classes
    if not 0 <= args.target < C:
        raise CommandFailed(f"--class {args.target} out of range [0, {C})", EXIT_INVALID)
    expl = explain_prediction(model, img, args.target)
    meta = write_bundle(args.out, expl)
    mu = model.logits(img[None])[0]
    meta["logits"] = [float(v) for v in mu]
    meta["predicted_class"] = int(np.argmax(mu))
    meta["completeness_residual"] = expl.completeness_residual
    _write_json(os.path.join(args.out, "report.json"), meta)
    print(" ".join(f"mu[{c}]={v:.6g}" for c, v in enumerate(mu)))
    print(f"explanation of class {args.target} written to {args.out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    report = audit_axioms(seed=args.seed, probes=args.probes)
    for line in report.lines():
        print(line)
    if args.out:
        _write_json(args.out, report.to_dict())
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_bench(args) -> int:
    model, _ = load_checkpoint(args.model)
    scenes = _load_split(args.data, args.split)
    if fb.num_classes_in(scenes) > model.cfg.num_classes:
        raise CommandFailed(f"{args.data} has more classes than the model's {model.cfg.num_classes}", EXIT_INVALID)
    if args.limit:
        scenes = scenes[: args.limit]
    report = metric_suite(SICAdapter(model), scenes, seed=args.seed).to_dict()
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.model)), "metrics.json")
    _write_json(out, report)
    print(" ".join(f"{k}={v:.3f}" for k, v in report.items() if isinstance(v, float)))
    print(f"metrics written to {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sic", description="Similarity-based interpretable classifier toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a FunnyBirds-lite dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True, help="training scenes per class")
    g.add_argument("--test-per-class", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="explain one class logit for an image")
    e.add_argument("--model", required=True)
    e.add_argument("--image", required=True, help="PNG, or .npy in [3,H,W] / [H,W,3] / [6,H,W] form")
    e.add_argument("--class", dest="target", type=int, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_explain)

    a = sub.add_parser("audit", help="run the attribution axiom audit")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--probes", type=int, default=100)
    a.add_argument("--out", help="optional JSON report path")
    a.set_defaults(func=cmd_audit)

    b = sub.add_parser("bench", help="score explanation quality on a dataset")
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--split", default="test")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--limit", type=int, default=0, help="score only the first N scenes")
    b.add_argument("--out", help="defaults to metrics.json next to the model")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CommandFailed as e:
        print(f"sic {args.command}: {e}", file=sys.stderr)
        return e.code
    except ValueError as e:
        print(f"sic {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, LookupError) as e:
        print(f"sic {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
