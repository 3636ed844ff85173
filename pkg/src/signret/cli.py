"""Command-line front end: ``signret <command> [options]``.

Every command writes into its own ``--out`` run directory, starting with
the fully resolved ``config.json``. Artifacts are deterministic given the
config and seed; wall-clock timestamps appear only in ``log.txt``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

from . import experiments as ex
from .container import ContainerError
from .corpus import generate_synthetic, load_bundle, read_subtitles, save_bundle, write_subtitles
from .recognizer import WindowClassifier
from .retrieval import SimilarityMatrix, evaluate_both, format_table, fuse, write_metrics
from .spotalign import (
    format_yield_report,
    initial_state,
    read_annotations,
    spot_align_round,
    write_annotations,
)
from .trainer import load_checkpoint, save_checkpoint, select_model

PRESET_HELP = """presets:
  desk   vocab 30, 300/60/60 videos, D=64, D_t=16, C=64, K=4, batch 16,
         classifier hidden 32, domain gap 12 (default)
  paper  vocab 1887 (1079 mouthing), 31075/1739/2348 videos, D=1024,
         D_t=300, C=512, K=20, batch 128, classifier hidden 1024
shared training defaults: margin 0.2, 40 epochs RAdam lr 1e-3 wd 1e-5;
classifier 25 epochs SGD momentum 0.9 lr 1e-2 /10 at epoch 20, window 16;
thresholds: mouthing 0.5, dictionary 0.75, recognition 0.5.
override any key with --set section.key=value (e.g. --set train.epochs=5)."""


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    over: dict = {}
    if args.config:
        over = json.loads(Path(args.config).read_text())
        if not isinstance(over, dict):
            raise UsageError(f"{args.config}: config file must hold a JSON object")
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        section, dot, name = key.partition(".")
        if dot:
            over.setdefault(section, {})[name] = _parse_value(value)
        else:
            over[section] = _parse_value(value)
    if args.seed is not None:
        over["seed"] = args.seed
    return over


def _resolve(args, corpus_config: Optional[dict] = None) -> dict:
    try:
        cfg = ex.resolve_config(args.preset, _overrides(args))
    except ValueError as e:
        raise UsageError(str(e)) from e
    if corpus_config:
        cfg["synthetic"].update({k: v for k, v in corpus_config.items() if k != "seed"})
    cfg["command"] = args.command
    return cfg


def _prepare(args, cfg: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_config(out, cfg)
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    args.handlers.append(handler)
    return out


def _load_bundle(args):
    if not args.corpus:
        raise UsageError("--corpus is required")
    return load_bundle(args.corpus)


# --------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> None:
    cfg = _resolve(args)
    out = _prepare(args, cfg)
    bundle = generate_synthetic(ex.synthetic_config(cfg))
    save_bundle(bundle, out)
    print(f"wrote {len(bundle.videos)} videos, {len(bundle.mouthing)} mouthing candidates to {out}")


def cmd_spot(args) -> None:
    bundle = _load_bundle(args)
    cfg = _resolve(args, bundle.config)
    if args.rounds is not None:
        cfg["spot"]["rounds"] = args.rounds
    out = _prepare(args, cfg)
    scfg = ex.spot_config(cfg, args.workers)
    state = initial_state(bundle, scfg)
    write_annotations(out / "annotations_M.txt", state.mouthing)
    for _ in range(scfg.rounds):
        state = spot_align_round(state, bundle, scfg)
        write_annotations(out / f"annotations_D{state.iteration}.txt", state.dictionary)
    write_annotations(out / "annotations.txt", state.current())
    if state.classifier is not None:
        state.classifier.save(out / "spot_classifier.sgc", {"round": state.iteration})
    report = format_yield_report(state)
    (out / "yield.txt").write_text(report)
    (out / "yield.json").write_text(json.dumps(state.yields, indent=1, sort_keys=True) + "\n")
    print(report, end="")


def cmd_train_sr(args) -> None:
    bundle = _load_bundle(args)
    cfg = _resolve(args, bundle.config)
    if not args.annotations:
        raise UsageError("--annotations is required")
    if args.with_exemplars:
        cfg["sr"]["with_exemplars"] = True
    out = _prepare(args, cfg)
    annotations = read_annotations(args.annotations)
    clf = ex.train_sr(bundle, annotations, ex.classifier_config(cfg), cfg["sr"]["with_exemplars"])
    clf.save(out / "classifier.sgc", {"annotations": len(annotations)})
    print(f"trained recognizer on {len(annotations)} annotations -> {out / 'classifier.sgc'}")


def cmd_train_cm(args) -> None:
    bundle = _load_bundle(args)
    cfg = _resolve(args, bundle.config)
    out = _prepare(args, cfg)
    subs = read_subtitles(args.subtitles) if args.subtitles else None
    model, history = ex.train_cm(bundle, cfg, subs, log_path=out / "epochs.log")
    best = select_model(history)
    save_checkpoint(out / "checkpoint.sgk", model,
                    {"train": asdict(ex.train_config(cfg)), "model": cfg["model"],
                     "seed": cfg["seed"], "best_epoch": best.epoch})
    print(f"best epoch {best.epoch} (val gm {best.geometric_mean:.2f}) -> {out / 'checkpoint.sgk'}")


def cmd_eval(args) -> None:
    sources = [x for x in (args.checkpoint, args.classifier, args.sim) if x]
    if len(sources) != 1:
        raise UsageError("give exactly one of --checkpoint, --classifier or --sim")
    if args.sim:
        cfg = _resolve(args)
        sim = SimilarityMatrix.load(args.sim)
        out = _prepare(args, cfg)
    else:
        bundle = _load_bundle(args)
        cfg = _resolve(args, bundle.config)
        if args.threshold is not None:
            cfg["sr"]["threshold"] = args.threshold
        out = _prepare(args, cfg)
        subs = read_subtitles(args.subtitles) if args.subtitles else None
        if args.checkpoint:
            model, _ = load_checkpoint(args.checkpoint)
            sim = ex.cm_similarity(model, bundle, args.split, subs)
        else:
            clf = WindowClassifier.load(args.classifier)
            sim = ex.sr_similarity(clf, bundle, args.split, cfg["sr"]["threshold"], subs, args.workers)
        sim.save(out / "similarity.sgs")
        # score from the stored precision so `eval --sim` reproduces these metrics
        sim = SimilarityMatrix.load(out / "similarity.sgs")
    _write_metrics(out, sim, args.name)


def _write_metrics(out: Path, sim: SimilarityMatrix, name: str) -> None:
    metrics = evaluate_both(sim)
    write_metrics(out / "metrics.json", metrics, {"name": name})
    table = format_table({name: {d: m.to_dict() for d, m in metrics.items()}})
    (out / "metrics.txt").write_text(table)
    print(table, end="")


def cmd_fuse(args) -> None:
    if not args.sim or len(args.sim) != 2:
        raise UsageError("fuse needs exactly two --sim files")
    cfg = _resolve(args)
    cfg["fusion"] = {"weights": list(args.weights), "normalize": args.normalize}
    a, b = (SimilarityMatrix.load(p) for p in args.sim)
    out = _prepare(args, cfg)
    fused = fuse(a, b, tuple(args.weights), args.normalize)
    fused.save(out / "similarity.sgs")
    fused = SimilarityMatrix.load(out / "similarity.sgs")
    _write_metrics(out, fused, args.name)


def cmd_sweep_threshold(args) -> None:
    bundle = _load_bundle(args)
    if not args.classifier:
        raise UsageError("--classifier is required")
    cfg = _resolve(args, bundle.config)
    cfg["sweep"] = {"thresholds": list(args.thresholds), "split": args.split}
    out = _prepare(args, cfg)
    clf = WindowClassifier.load(args.classifier)
    results = ex.threshold_sweep(clf, bundle, args.split, args.thresholds, args.workers)
    table = ex.format_sweep_table(results)
    (out / "sweep.txt").write_text(table)
    payload = [{"threshold": t, **m.to_dict()} for t, m in results.items()]
    (out / "sweep.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(table, end="")


def cmd_ablate_alignment(args) -> None:
    bundle = _load_bundle(args)
    cfg = _resolve(args, bundle.config)
    if args.shift_mean is not None:
        cfg["ablation"]["shift_mean"] = args.shift_mean
    if args.shift_sigma is not None:
        cfg["ablation"]["shift_sigma"] = args.shift_sigma
    out = _prepare(args, cfg)
    clf = WindowClassifier.load(args.classifier) if args.classifier else None
    ab = cfg["ablation"]
    write_subtitles(out / "subtitles_speech.txt",
                    ex.speech_aligned(bundle, ab["shift_mean"], ab["shift_sigma"], cfg["seed"]))
    results = ex.alignment_ablation(bundle, cfg, clf)
    table = ex.format_ablation_table(results)
    (out / "ablation.txt").write_text(table)
    payload = {a: {m: x.to_dict() for m, x in row.items()} for a, row in results.items()}
    (out / "ablation.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(table, end="")


def _metrics_source(spec: str):
    name, sep, path = spec.partition("=")
    if not sep:
        path, name = spec, ""
    p = Path(path)
    if p.is_dir():
        p = p / "metrics.json"
    data = json.loads(p.read_text())
    return name or data.get("name") or p.parent.name, data


def cmd_report(args) -> None:
    if not args.metrics:
        raise UsageError("report needs at least one --metrics source")
    cfg = _resolve(args)
    cfg["report"] = {"metrics": list(args.metrics)}
    out = _prepare(args, cfg)
    rows: Dict[str, dict] = {}
    for spec in args.metrics:
        name, data = _metrics_source(spec)
        rows[name] = {d: data[d] for d in ("t2v", "v2t") if d in data}
    table = format_table(rows)
    (out / "report.txt").write_text(table)
    (out / "report.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    print(table, end="")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="run directory for all outputs")
    common.add_argument("--preset", choices=sorted(ex.PRESETS), default="desk",
                        help="base configuration (see 'signret --help')")
    common.add_argument("--seed", type=int, default=None, help="seed (preset default 0)")
    common.add_argument("--workers", type=int, default=1,
                        help="threads for spotting and recognition inference")
    common.add_argument("--config", help="JSON file of config overrides, by section")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="signret", description="Sign-language video retrieval experiments.",
        epilog=PRESET_HELP, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    parser.subcommands = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           formatter_class=fmt)
        p.set_defaults(func=func)
        parser.subcommands[name] = p
        return p

    add("gen-synth", cmd_gen_synth, "generate a synthetic corpus")

    p = add("spot", cmd_spot, "mouthing filter plus dictionary spotting rounds")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--rounds", type=int, default=None, help="dictionary rounds (preset default 3)")

    p = add("train-sr", cmd_train_sr, "train the recognition classifier on annotations")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--annotations", help="annotation file (e.g. spot run's annotations.txt)")
    p.add_argument("--with-exemplars", action="store_true", help="also train on lexicon exemplars")

    p = add("train-cm", cmd_train_cm, "train the cross-modal embedding")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--subtitles", help="alternative subtitle timings for all splits")

    p = add("eval", cmd_eval, "t2v and v2t metrics from a checkpoint, classifier or similarity file")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--checkpoint", help="cross-modal checkpoint")
    p.add_argument("--classifier", help="recognition classifier (IoU retrieval)")
    p.add_argument("--sim", help="similarity file")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=None, help="recognition threshold (default 0.5)")
    p.add_argument("--subtitles", help="alternative subtitle timings")
    p.add_argument("--name", default="model", help="row label in the metrics table")

    p = add("fuse", cmd_fuse, "late fusion of two similarity files")
    p.add_argument("--sim", action="append", help="similarity file; give twice")
    p.add_argument("--weights", type=float, nargs=2, default=(0.5, 0.5))
    p.add_argument("--normalize", choices=("minmax",), default=None, help="per-query rescaling")
    p.add_argument("--name", default="fused", help="row label in the metrics table")

    p = add("sweep-threshold", cmd_sweep_threshold, "recognition retrieval across thresholds")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--classifier", help="recognition classifier")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--thresholds", type=float, nargs="+", default=list(ex.SWEEP_THRESHOLDS))

    p = add("ablate-alignment", cmd_ablate_alignment, "signing- vs speech-aligned subtitles")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--classifier", help="also evaluate this recognition classifier")
    p.add_argument("--shift-mean", type=float, default=None,
                   help="frames; default one mean sign duration")
    p.add_argument("--shift-sigma", type=float, default=None, help="frames (preset default 4)")

    p = add("report", cmd_report, "merge metrics files into one table")
    p.add_argument("--metrics", action="append", metavar="[NAME=]PATH",
                   help="metrics.json or run directory; repeatable")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("signret: error: a command is required", file=sys.stderr)
        return 2
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    args.handlers = []
    if args.verbose:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)
        args.handlers.append(h)
    try:
        args.func(args)
    except UsageError as e:
        parser.subcommands[args.command].print_usage(sys.stderr)
        print(f"signret {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, ContainerError) as e:
        print(f"signret {args.command}: error: {e}", file=sys.stderr)
        return 1
    finally:
        for h in args.handlers:
            root.removeHandler(h)
            h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
