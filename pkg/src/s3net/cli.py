"""Command-line interface: one executable, one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis as an
from . import pipeline as pl
from .config import ConfigError, RunConfig, load_config
from .pipeline import STAGES, PipelineError, RunPaths
from .train import DivergenceError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (run/corpus/sweep)")


def _add_pruning_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=("lth", "te", "random"), default=None)
    p.add_argument("--scope", choices=("layerwise", "global"), default=None)
    p.add_argument("--prune-rate", type=float, default=None)
    p.add_argument("--masks", default=None,
                   help="mask count (1, L, n_high+1) or path to a grouping JSON file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s3net",
        description="Language-adaptive self-supervised pretraining with sparse "
                    "sharing sub-networks, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_common(p)

    for name, helptext in (
            ("pretrain", "multilingual contrastive pretraining"),
            ("warmup", "per-language/group warmup from the pretrained model"),
            ("extract-masks", "extract sub-network masks"),
            ("adapt", "masked joint adaptation"),
            ("eval", "held-out evaluation of checkpoints"),
            ("analyze", "mask structure report")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_pruning_flags(p)

    p = sub.add_parser("pipeline", help="run all stages into one run directory")
    _add_common(p)
    _add_pruning_flags(p)
    p.add_argument("--skip-to", choices=STAGES, default=None,
                   help="skip stages before this one, reusing existing artifacts")

    p = sub.add_parser("sweep", help="run the ablation grid")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "strategy", None) is not None:
        overrides["strategy"] = args.strategy
    if getattr(args, "scope", None) is not None:
        overrides["scope"] = args.scope
    if getattr(args, "prune_rate", None) is not None:
        overrides["prune_rate"] = args.prune_rate
    masks = getattr(args, "masks", None)
    if masks is not None:
        try:
            overrides["n_masks"] = int(masks)
        except ValueError:
            path = Path(masks)
            if not path.exists():
                raise ConfigError(f"--masks: '{masks}' is neither a count nor a file")
            overrides["grouping"] = json.loads(path.read_text())
    return cfg.with_overrides(**overrides) if overrides else cfg


def _run_dir(args) -> Path:
    return Path(args.out) if args.out else Path("run")


def _dispatch(args) -> int:
    cfg = _load(args)
    cmd = args.command

    if cmd == "gen-data":
        corpus = pl.stage_gen_data(cfg, corpus_dir=args.out)
        print(f"corpus written to {corpus.root} ({len(corpus.languages)} languages, "
              f"digest {corpus.digest()[:12]})")
        return 0

    if cmd == "sweep":
        report = pl.run_sweep(cfg, _run_dir(args), jobs=args.jobs)
        print(report["text"], end="")
        print(f"sweep artifacts in {_run_dir(args)}")
        return 0

    if cmd == "pipeline":
        summary = pl.run_pipeline(cfg, _run_dir(args), skip_to=args.skip_to)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0

    run = RunPaths(_run_dir(args))
    corpus = pl.load_corpus(cfg)
    pl.write_effective_config(cfg, run.root)

    if cmd == "pretrain":
        ckpt = pl.stage_pretrain(cfg, run, corpus)
        print(f"pretrain checkpoint at {run.ckpt_pretrain} (step {ckpt.step})")
        return 0

    base = pl._load_ckpt(run.ckpt_pretrain, "pretrain")
    if cmd == "warmup":
        pl.stage_warmup(cfg, run, corpus, base)
        print(f"warmup checkpoints under {run.root / 'checkpoints' / 'warmup'}")
        return 0

    if cmd == "extract-masks":
        masks = pl.stage_extract_masks(cfg, run, corpus, base)
        groups = sorted({m.group for m in masks.values()})
        print(f"{len(groups)} mask(s) written to {run.masks_dir}: {', '.join(groups)}")
        return 0

    masks = pl.load_masks(run)
    if cmd == "adapt":
        ckpt = pl.stage_adapt(cfg, run, corpus, base, masks)
        print(f"adapt checkpoint at {run.ckpt_adapt} (step {ckpt.step})")
        return 0

    if cmd == "eval":
        pl.stage_eval(cfg, run, corpus, base, None, "pretrain")
        adapted = pl._load_ckpt(run.ckpt_adapt, "adapt")
        report = pl.stage_eval(cfg, run, corpus, adapted, masks, "adapt")
        print((run.reports / "eval_adapt.txt").read_text(), end="")
        print(f"average held-out loss: {report.average_total:.5f}")
        return 0

    if cmd == "analyze":
        report = pl.stage_analyze(run, masks)
        print((run.reports / "mask_report.txt").read_text(), end="")
        return 0

    raise ConfigError(f"unknown command '{cmd}'")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, DivergenceError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
