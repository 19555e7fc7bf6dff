"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 input or configuration error.
``SCENETEXT_RUN_DIR`` supplies a default ``--run-dir`` and
``SCENETEXT_WORKERS`` a default ``--workers``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import pydantic
import torch
import yaml

from .config import RunConfig
from .coref import analyze, dump_attention_grids, write_report as write_coref_report
from .corpus import (
    SYNTH_TASKS,
    CorpusError,
    FeatureBuilder,
    FilterRules,
    build_corpus,
    read_records,
    render_histogram,
    synth_corpus,
)
from .dataset import SchemaError, read_samples, read_sidecar, write_samples
from .metrics import MetricError, TASK_METRICS, ground_truth_for, read_predictions, score_predictions, write_report
from .model import ConfigMismatch
from .training import (
    RunManifest,
    Trainer,
    TrainingDiverged,
    build_vocabularies,
    dataset_id,
    finetune,
    finetune_trainer_from,
    joint_train,
    pretrain,
    text_vocabulary,
)

logger = logging.getLogger("scenetext")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad paths, flags or files; maps to exit code 2."""


# ---------------------------------------------------------------- helpers


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _fresh_output(path: str | Path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise InputError(f"{p} exists; pass --force to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _parse_set(items: list[str]) -> dict:
    """``a.b.c=value`` pairs -> nested dict; values parsed as YAML scalars."""
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise InputError(f"--set expects key.path=value, got {item!r}")
        node = out
        *parents, leaf = key.split(".")
        for k in parents:
            node = node.setdefault(k, {})
        node[leaf] = yaml.safe_load(raw)
    return out


def load_config(args) -> RunConfig:
    base = RunConfig.full() if args.preset == "full" else RunConfig.desk()
    cfg = RunConfig.from_file(_existing(args.config, "config"), base if args.preset else None) if args.config else base
    over = _parse_set(args.set or [])
    if getattr(args, "seed", None) is not None:
        over.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        over.setdefault("train", {})["workers"] = args.workers
    return cfg.updated(over) if over else cfg


def _load_data(path: str | None, what: str):
    p = _existing(path, what)
    return [] if p is None else read_samples(p)


def _run_dir(args) -> Path:
    path = args.run_dir or os.environ.get("SCENETEXT_RUN_DIR")
    if not path:
        raise InputError("no run directory: pass --run-dir or set SCENETEXT_RUN_DIR")
    run_dir = Path(path)
    if run_dir.exists() and any(run_dir.iterdir()) and not args.resume:
        if not args.force:
            raise InputError(f"run directory {run_dir} is not empty; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _finish(manifest: RunManifest, run_dir: Path, trainer: Trainer, result) -> None:
    manifest.iterations = trainer.iteration
    manifest.best = result.best_metrics or (result.evals[-1]["eval"] if result.evals else {})
    manifest.finished = time.time()
    manifest.write(run_dir / "manifest.json")
    print(json.dumps({"run_dir": str(run_dir), "iterations": trainer.iteration, "best": manifest.best}))


# ---------------------------------------------------------------- commands


def cmd_build_corpus(args) -> int:
    cfg = load_config(args)
    records = read_records(_existing(args.records, "records file"))
    rules = FilterRules.from_file(_existing(args.rules, "rules file")) if args.rules else FilterRules.from_config(cfg.corpus)
    rows = read_sidecar(_existing(args.object_features, "object feature file")) if args.object_features else None
    out = _fresh_output(args.out, args.force)
    stats_path = _fresh_output(args.stats or f"{out}.stats.json", args.force)
    try:
        result = build_corpus(
            records, out, rules, FeatureBuilder.from_config(cfg), cfg.corpus.max_malformed_fraction,
            rows, cfg.corpus.histogram_overflow, args.sidecar,
        )
    except CorpusError as e:
        raise InputError(str(e)) from e
    result.stats["config_hash"] = cfg.config_hash()
    stats_path.write_text(json.dumps(result.stats, indent=2) + "\n")
    if args.histogram:
        render_histogram(result.stats, _fresh_output(args.histogram, args.force))
    print(json.dumps({"kept": len(result.samples), "filter_reasons": result.stats["filter_reasons"],
                      "malformed": result.stats["malformed"]}))
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    cfg = load_config(args)
    out = _fresh_output(args.out, args.force)
    data = synth_corpus(args.seed, args.n, args.task, FeatureBuilder.from_config(cfg), args.prefix)
    write_samples(data, out, sidecar=args.sidecar)
    print(json.dumps({"out": str(out), "samples": len(data), "task": args.task, "seed": args.seed}))
    return EXIT_OK


def _trainer_for(args, cfg: RunConfig, run_dir: Path, data, extra, mode: str) -> tuple[Trainer, str]:
    """Fresh, resumed or checkpoint-initialized trainer, plus how its decoder was set up."""
    if args.resume:
        return Trainer.from_checkpoint(_existing(args.resume, "checkpoint"), cfg, run_dir, resume=True), "resumed"
    if getattr(args, "init", None):
        trainer = finetune_trainer_from(_existing(args.init, "checkpoint"), cfg, data, mode, run_dir)
        return trainer, "fresh"
    text = text_vocabulary([*data, *extra])
    trainer = finetune_trainer_from(None, cfg, data, mode, run_dir, text_vocab=text)
    return trainer, "fresh"


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    data = _load_data(args.data, "dataset")
    heldout = _load_data(args.heldout, "held-out dataset") or None
    run_dir = _run_dir(args)
    if args.resume:
        trainer = Trainer.from_checkpoint(_existing(args.resume, "checkpoint"), cfg, run_dir, resume=True)
    else:
        text, answers = build_vocabularies(cfg, data, heldout or [], mode="caption")
        trainer = Trainer(cfg, text, answers, run_dir)
    datasets = {"train": dataset_id(data)} | ({"heldout": dataset_id(heldout)} if heldout else {})
    manifest = RunManifest(cfg.train.seed, "pretrain", datasets, cfg.config_hash(), decoder_init="n/a")
    manifest.write(run_dir / "manifest.json")
    result = pretrain(trainer, data, args.iters, heldout)
    _finish(manifest, run_dir, trainer, result)
    return EXIT_OK


def _supervised(args, runner) -> int:
    cfg = load_config(args)
    data = _load_data(args.data, "dataset")
    val = _load_data(args.val, "validation dataset")
    run_dir = _run_dir(args)
    trainer, decoder = _trainer_for(args, cfg, run_dir, data, val, args.mode)
    datasets = {"train": dataset_id(data)} | ({"val": dataset_id(val)} if val else {})
    task = f"{runner.__name__}_{args.mode}"
    manifest = RunManifest(cfg.train.seed, task, datasets, cfg.config_hash(), decoder_init=decoder)
    manifest.write(run_dir / "manifest.json")
    result = runner(trainer, data, args.mode, args.iters, val or None)
    _finish(manifest, run_dir, trainer, result)
    return EXIT_OK


def cmd_finetune(args) -> int:
    return _supervised(args, finetune)


def cmd_joint_train(args) -> int:
    return _supervised(args, joint_train)


def cmd_evaluate(args) -> int:
    data = _load_data(args.data, "dataset")
    out = _fresh_output(args.out, args.force) if args.out else None
    if args.predictions:
        cfg = load_config(args)
        predictions = read_predictions(_existing(args.predictions, "predictions file"))
    elif args.checkpoint:
        trainer = Trainer.from_checkpoint(_existing(args.checkpoint, "checkpoint"), resume=False)
        cfg = trainer.cfg
        predictions = trainer.predict(data, "caption" if args.task == "caption" else "vqa")
    else:
        raise InputError("evaluate needs --checkpoint or --predictions")
    metrics = args.metrics or list(TASK_METRICS[args.task])
    gt = ground_truth_for(data, args.task)
    e = cfg.eval
    reports = score_predictions(predictions, gt, metrics, e.anls_threshold, e.cider_sigma, e.cider_n)
    if out:
        write_report(reports, out)
    print(json.dumps({m: r.to_dict() for m, r in reports.items()}))
    return EXIT_OK


def cmd_analyze_coref(args) -> int:
    data = _load_data(args.data, "dataset")
    out = _fresh_output(args.out, args.force)
    trainer = Trainer.from_checkpoint(_existing(args.checkpoint, "checkpoint"), resume=False)
    model = trainer.model
    if args.random_init:
        torch.manual_seed(trainer.cfg.train.seed)
        model.apply(model._init)
    report = analyze(model, data, trainer.text_vocab, thresholds=trainer.cfg.geometry.thresholds())
    extra = {"checkpoint": str(args.checkpoint), "random_init": args.random_init, "dataset": dataset_id(data),
             "config_hash": trainer.cfg.config_hash()}
    if args.dump_attention:
        dump_dir = Path(args.dump_attention)
        if dump_dir.exists() and any(dump_dir.iterdir()) and not args.force:
            raise InputError(f"{dump_dir} is not empty; pass --force to overwrite")
        written = dump_attention_grids(model, data, trainer.text_vocab, dump_dir, args.dump_limit)
        extra["attention_grids"] = [str(p) for p in written]
    write_coref_report(report, out, extra)
    print(json.dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="YAML run config (may name a preset)")
        p.add_argument("--preset", choices=("desk", "full"), default=None,
                       help="base preset; default desk unless the config file names one")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. schedule.max_iters=50")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _training_flags(p: argparse.ArgumentParser) -> None:
    _common(p)
    p.add_argument("--data", required=True, help="training dataset (JSONL)")
    p.add_argument("--run-dir", default=None, help="output directory (default: $SCENETEXT_RUN_DIR)")
    p.add_argument("--iters", type=int, default=None, help="iterations to run (default: schedule.max_iters)")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--workers", type=int, default=_env_int("SCENETEXT_WORKERS"),
                   help="instance-building threads (default: $SCENETEXT_WORKERS or config)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")


def _env_int(name: str) -> int | None:
    v = os.environ.get(name)
    return int(v) if v else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenetext", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("build-corpus", help="filter raw OCR/caption records into a dataset", formatter_class=fmt)
    _common(p)
    p.add_argument("--records", required=True, help="raw records, one JSON object per line")
    p.add_argument("--rules", default=None, help="filter rules (JSON/YAML); default from config")
    p.add_argument("--object-features", default=None, help="feature sidecar referenced by feature_ref")
    p.add_argument("--out", required=True, help="output dataset (JSONL)")
    p.add_argument("--stats", default=None, help="stats JSON (default: <out>.stats.json)")
    p.add_argument("--histogram", default=None, help="optional histogram image")
    p.add_argument("--sidecar", action="store_true", help="store feature vectors in a binary sidecar")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("synth-corpus", help="generate a synthetic desk-scale dataset", formatter_class=fmt)
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--task", choices=SYNTH_TASKS, default="vqa")
    p.add_argument("--prefix", default=None, help="image id prefix (default synth<seed>)")
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", action="store_true")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("pretrain", help="MLM + ITM + RPP pre-training", formatter_class=fmt)
    _training_flags(p)
    p.add_argument("--heldout", default=None, help="held-out split for model selection (default: carve from --data)")
    p.set_defaults(func=cmd_pretrain)

    for name, func, text in (("finetune", cmd_finetune, "answer/caption decoding"),
                             ("joint-train", cmd_joint_train, "single-stage training with auxiliary pre-training losses")):
        p = sub.add_parser(name, help=text, formatter_class=fmt)
        _training_flags(p)
        p.add_argument("--mode", choices=("vqa", "caption"), default="vqa")
        p.add_argument("--val", default=None, help="validation dataset")
        if name == "finetune":
            p.add_argument("--init", default=None, help="pre-trained checkpoint (decoder is re-initialized)")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="score a checkpoint or a predictions file", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=tuple(TASK_METRICS), default="vqa")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--predictions", default=None, help="JSONL of {sample_id, prediction}; bypasses the model")
    p.add_argument("--metrics", nargs="*", default=None, help="subset of the task's metrics")
    p.add_argument("--out", default=None, help="per-sample report (JSONL)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-coref", help="coreference scores from fusion attention", formatter_class=fmt)
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="samples to analyze (typically the validation split)")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--random-init", action="store_true", help="score a randomly initialized model of the same shape")
    p.add_argument("--dump-attention", default=None, metavar="DIR", help="write per-sample attention grids here")
    p.add_argument("--dump-limit", type=int, default=8)
    p.set_defaults(func=cmd_analyze_coref)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, SchemaError, MetricError, ConfigMismatch,
            pydantic.ValidationError, yaml.YAMLError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as e:
        print(f"error: {e} (last good checkpoint: {e.last_good})", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - top-level boundary
        logger.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
