"""Command line entry point: ``scenariogcn <command> [options]``.

Every command prints its effective configuration (all defaults filled in)
as a ``# config`` JSON line on stdout before doing any work.  Exit status is
0 on success, 1 on bad input or usage, 2 on an internal failure.  Set
``SCENARIOGCN_LOG`` to DEBUG, INFO (default) or WARNING for log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import data, metrics, report, synth
from .model import ModelConfig, init_params, load_checkpoint, model_forward, save_checkpoint
from .training import ConfigurationError, TrainConfig, train, write_metrics_csv

log = logging.getLogger("scenariogcn")

LOG_ENV = "SCENARIOGCN_LOG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _class_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out or any(not 0 <= c <= 7 for c in out):
        raise argparse.ArgumentTypeError(f"classes must lie in 0-7, got {text!r}")
    return sorted(set(out))


def _epoch_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _ratio(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1), got {v}")
    return v


def _existing(path: str) -> str:
    if not os.path.exists(path):
        raise argparse.ArgumentTypeError(f"no such file or directory: {path}")
    return path


def _model_flags(p):
    g = p.add_argument_group("ablation flags")
    g.add_argument("--baseline", action="store_true", help="single GCN over the union of all relations")
    g.add_argument("--no-map", action="store_true", help="drop lane waypoints and map relations")
    g.add_argument("--weighted-adjacency", action="store_true", help="edge weight 1/max(distance, 0.5 m)")
    g.add_argument("--residual", action="store_true", help="residual connections around GCN blocks")
    g.add_argument("--no-temporal", action="store_true", help="classify spatial features frame by frame")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="scenariogcn", description="Per-frame traffic scenario classification.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic labeled dataset")
    p.add_argument("--classes", type=_class_list, default=_class_list("1-7"),
                   help="e.g. 1-7 or 0,3,5; class 0 adds background sequences without a scenario")
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=synth.Knobs.noise)
    p.add_argument("--distractors", type=int, default=synth.Knobs.distractors)
    p.add_argument("--no-transform", action="store_true", help="keep the template map frame")
    p.add_argument("--out", required=True)

    p = sub.add_parser("resample", help="bring 2/4/10 Hz sequences to 4 Hz")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", help="cut labeled scenarios with random context")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-context", type=int, default=data.MAX_CONTEXT)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="stratified train/val manifest")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--ratio", type=_ratio, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    d = TrainConfig()
    p = sub.add_parser("train", help="train a model; writes model.json, metrics.csv, manifest.json")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--manifest", type=_existing, help="use this split instead of drawing one")
    p.add_argument("--split", type=_ratio, default=0.8, help="train fraction when no manifest is given")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr0)
    p.add_argument("--decay-factor", type=float, default=d.decay_factor)
    p.add_argument("--decay-after", type=_epoch_list, default=d.decay_after_epochs,
                   help="comma separated epochs after which the rate decays")
    _model_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="metrics and plots for a checkpoint or a prediction file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=_existing, help="model.json or a train output directory")
    src.add_argument("--pred", type=_existing, help="predictions written by 'predict'")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--subset", choices=("all", "train", "val"), default="all")
    p.add_argument("--manifest", type=_existing)
    p.add_argument("--edd", action="store_true", help="also write the error distribution")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("predict", help="per-frame labels and probabilities as JSON lines")
    p.add_argument("--ckpt", type=_existing, required=True)
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("edd-report", help="error distribution of predictions against labels")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--pred", type=_existing, required=True)
    p.add_argument("--out", required=True, help="report directory")
    return ap


# ---------------------------------------------------------------- helpers


def _model_config(args) -> ModelConfig:
    if args.baseline and args.residual:
        raise UsageError("--baseline and --residual are mutually exclusive")
    if args.baseline and args.no_map:
        raise UsageError("--baseline needs map data; drop --no-map")
    return ModelConfig(
        use_map=not args.no_map,
        residual=args.residual,
        weighted_adjacency=args.weighted_adjacency,
        baseline=args.baseline,
        temporal=not args.no_temporal,
    )


def _ckpt_path(path: str) -> str:
    return os.path.join(path, "model.json") if os.path.isdir(path) else path


def _check_out_file(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")


def _batches(seqs, config: ModelConfig):
    return [data.sequence_to_batch(s, weighted=config.weighted_adjacency) for s in seqs]


def _select(seqs, args, default_manifest=None):
    if args.subset == "all":
        return seqs
    path = args.manifest or default_manifest
    if not path or not os.path.exists(path):
        raise UsageError(f"--subset {args.subset} needs a manifest (--manifest)")
    ids = set(data.read_manifest(path)[args.subset])
    chosen = [s for s in seqs if s.id in ids]
    if not chosen:
        raise UsageError(f"no sequence of --data is in the {args.subset} split of {path}")
    return chosen


PATH_ARGS = ("command", "data", "manifest", "out")


def effective_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items())}
    for k, v in cfg.items():
        if isinstance(v, tuple):
            cfg[k] = list(v)
    return cfg


def write_predictions(path, ids, preds):
    with open(path, "w") as fh:
        for sid, p in zip(ids, preds):
            rec = {"id": sid, "labels": [int(c) for c in p.labels],
                   "probs": [[float(v) for v in row] for row in p.probabilities]}
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def read_predictions(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                labels = [int(c) for c in rec["labels"]]
                probs = np.asarray(rec["probs"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed prediction record ({exc})") from exc
            if probs.shape != (len(labels), 8):
                raise ValueError(f"{path}:{lineno}: probs must be {len(labels)}x8")
            out[str(rec["id"])] = (labels, probs)
    return out


def _match_predictions(seqs, preds):
    gt, probs, labels = [], [], []
    for s in seqs:
        if s.id not in preds:
            raise ValueError(f"no prediction for sequence {s.id}")
        lab, pr = preds[s.id]
        if len(lab) != s.n_frames:
            raise ValueError(f"sequence {s.id}: {len(lab)} predicted frames, {s.n_frames} labeled")
        gt.append(s.labels)
        probs.append(pr)
        labels.append(lab)
    return gt, probs, labels


# ---------------------------------------------------------------- commands


def cmd_generate(args):
    _check_out_file(args.out)
    knobs = synth.Knobs(noise=args.noise, distractors=args.distractors, transform=not args.no_transform)
    seqs = synth.generate_dataset(args.classes, args.per_class, args.seed, knobs)
    data.write_jsonl(seqs, args.out)
    log.info("wrote %d sequences to %s", len(seqs), args.out)


def cmd_resample(args):
    _check_out_file(args.out)
    seqs = [data.resample_to_4hz(s) for s in data.read_jsonl(args.data)]
    data.write_jsonl(seqs, args.out)
    log.info("resampled %d sequences", len(seqs))


def cmd_extract(args):
    _check_out_file(args.out)
    out = []
    for k, s in enumerate(data.read_jsonl(args.data)):
        out.extend(data.extract_scenarios(s, seed=args.seed + k, max_context=args.max_context))
    data.write_jsonl(out, args.out)
    log.info("extracted %d scenarios", len(out))


def cmd_split(args):
    _check_out_file(args.out)
    seqs = data.read_jsonl(args.data)
    tr, va = data.split(seqs, args.ratio, args.seed)
    data.write_manifest(data.build_manifest(seqs, tr, va), args.out)
    log.info("train %d / val %d sequences", len(tr), len(va))


def cmd_train(args):
    config = _model_config(args)
    tcfg = TrainConfig(epochs=args.epochs, lr0=args.lr, decay_factor=args.decay_factor,
                       decay_after_epochs=args.decay_after, seed=args.seed)
    seqs = data.read_jsonl(args.data)
    if args.manifest:
        m = data.read_manifest(args.manifest)
        tr, va = m["train"], m["val"]
    else:
        tr, va = data.split(seqs, args.split, args.seed)
    by_id = {s.id: s for s in seqs}
    manifest = data.build_manifest(seqs, tr, va)
    os.makedirs(args.out, exist_ok=True)
    data.write_manifest(manifest, os.path.join(args.out, "manifest.json"))
    train_b = _batches([by_id[i] for i in tr], config)
    val_b = _batches([by_id[i] for i in va], config)
    params = init_params(args.seed, config)
    result = train(tcfg, params, train_b, val_b)
    write_metrics_csv(result.log, os.path.join(args.out, "metrics.csv"))
    # file locations stay out so a checkpoint does not depend on where it was written
    hyper = {k: v for k, v in effective_config(args).items() if k not in PATH_ARGS}
    extra = {"train_config": hyper, "class_weights": [str(w) for w in result.weights.exact]}
    save_checkpoint(result.params, os.path.join(args.out, "model.json"), extra)
    log.info("saved checkpoint to %s", args.out)


def cmd_predict(args):
    _check_out_file(args.out)
    params = load_checkpoint(_ckpt_path(args.ckpt))
    seqs = data.read_jsonl(args.data)
    preds = [model_forward(params, b) for b in _batches(seqs, params.config)]
    write_predictions(args.out, [s.id for s in seqs], preds)
    log.info("wrote predictions for %d sequences", len(seqs))


def cmd_eval(args):
    seqs = data.read_jsonl(args.data)
    if args.ckpt:
        default_manifest = os.path.join(args.ckpt, "manifest.json") if os.path.isdir(args.ckpt) else None
        seqs = _select(seqs, args, default_manifest)
        params = load_checkpoint(_ckpt_path(args.ckpt))
        preds = [model_forward(params, b) for b in _batches(seqs, params.config)]
        gt = [s.labels for s in seqs]
        probs = [p.probabilities for p in preds]
        labels = [p.labels for p in preds]
    else:
        seqs = _select(seqs, args)
        gt, probs, labels = _match_predictions(seqs, read_predictions(args.pred))
    ev = metrics.evaluate_predictions(gt, probs, labels)
    files = report.write_report(ev, args.out, edd=args.edd)
    print(f"mean PR-AUC {ev.mean_pr_auc:.4f}  frame accuracy {ev.frame_accuracy:.4f}")
    log.info("wrote %s to %s", ", ".join(files), args.out)


def cmd_edd_report(args):
    seqs = data.read_jsonl(args.data)
    gt, _, labels = _match_predictions(seqs, read_predictions(args.pred))
    edd = metrics.EDDReport()
    for g, p in zip(gt, labels):
        edd = edd + metrics.edd_decompose(g, p)
    os.makedirs(args.out, exist_ok=True)
    report.write_edd_csv(edd, os.path.join(args.out, "edd.csv"))
    report.plot_edd_svg(edd, os.path.join(args.out, "edd.svg"))
    print(f"serious-error fraction {edd.serious_fraction:.4f} over {edd.total} frames")


COMMANDS = {
    "generate": cmd_generate,
    "resample": cmd_resample,
    "extract": cmd_extract,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "edd-report": cmd_edd_report,
}


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        args = build_parser().parse_args(argv)
        print("# config " + json.dumps(effective_config(args), sort_keys=True), flush=True)
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigurationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the internal-failure status
        log.exception("internal failure")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
