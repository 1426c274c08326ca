"""Run-directory orchestration of the full pipeline and ablation sweeps.

A run directory is self-contained and reproducible from its echoed config::

    run_dir/
      config.json                    # effective configuration
      metrics/<stage>.jsonl          # one JSON object per optimization step
      checkpoints/pretrain/          # checkpoint directory format
      checkpoints/warmup/<group>/
      checkpoints/adapt/
      masks/<group>.mask             # packed mask files
      masks/grouping.json
      reports/eval_pretrain.{json,txt}
      reports/eval_adapt.{json,txt}
      reports/mask_report.{json,txt}

Stage order: pretrain -> warmup (magnitude strategy only) -> extract-masks
-> adapt -> eval -> analyze. ``skip_to`` resumes from any stage, reusing
the artifacts already in the directory.
"""

from __future__ import annotations

import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

from . import analysis as an
from . import checkpoint as ck
from . import data as datamod
from . import pruning as prmod
from . import rng as rngmod
from . import train as trainmod
from .config import ConfigError, RunConfig, parse_config, resolve_grouping

STAGES = ("pretrain", "warmup", "extract-masks", "adapt", "eval", "analyze")


class PipelineError(RuntimeError):
    """A stage cannot run (missing artifact, failed precondition)."""


class RunPaths:
    def __init__(self, run_dir):
        self.root = Path(run_dir)

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    def metrics(self, stage: str) -> Path:
        return self.root / "metrics" / f"{stage}.jsonl"

    @property
    def ckpt_pretrain(self) -> Path:
        return self.root / "checkpoints" / "pretrain"

    def ckpt_warmup(self, group: str) -> Path:
        return self.root / "checkpoints" / "warmup" / group

    @property
    def ckpt_adapt(self) -> Path:
        return self.root / "checkpoints" / "adapt"

    @property
    def masks_dir(self) -> Path:
        return self.root / "masks"

    @property
    def grouping_file(self) -> Path:
        return self.masks_dir / "grouping.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


class JsonlWriter:
    """Deterministic metrics stream: sorted-key JSON, one object per line."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._f.close()


def write_effective_config(cfg: RunConfig, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.effective, indent=2, sort_keys=True))


def stage_gen_data(cfg: RunConfig, corpus_dir=None) -> datamod.Corpus:
    """Generate the synthetic corpus described by the config."""
    specs = cfg.language_specs()
    out = Path(corpus_dir) if corpus_dir is not None else cfg.corpus_path
    section = cfg.corpus_section
    return datamod.make_corpus(
        specs, out, window_seconds=float(section["window_seconds"]),
        sample_rate=int(section["sample_rate"]), seed=cfg.seed,
        split_fracs={k: float(v) for k, v in section["split_fracs"].items()})


def load_corpus(cfg: RunConfig) -> datamod.Corpus:
    path = cfg.corpus_path
    if not (path / "manifest.json").exists():
        raise PipelineError(f"corpus not found at '{path}' (run gen-data first)")
    return datamod.Corpus(path)


def _load_ckpt(path: Path, what: str) -> ck.Checkpoint:
    if not (path / "manifest.json").exists():
        raise PipelineError(f"missing {what} checkpoint at '{path}'")
    return ck.load_checkpoint(path)


def stage_pretrain(cfg: RunConfig, run: RunPaths, corpus: datamod.Corpus) -> ck.Checkpoint:
    writer = JsonlWriter(run.metrics("pretrain"))
    try:
        ckpt = trainmod.pretrain(corpus, cfg.model, cfg.objective,
                                 cfg.train_config("pretrain"), cfg.seed,
                                 config_digest=cfg.science_digest(), metrics=writer)
    finally:
        writer.close()
    ck.save_checkpoint(ckpt, run.ckpt_pretrain)
    return ckpt


def _grouping(cfg: RunConfig, corpus: datamod.Corpus) -> list[list[str]]:
    tiers = {l: corpus.tier(l) for l in corpus.languages}
    return resolve_grouping(cfg, corpus.languages, tiers)


def stage_warmup(cfg: RunConfig, run: RunPaths, corpus: datamod.Corpus,
                 base: ck.Checkpoint) -> None:
    """Per-group monolingual warmup from the pretrained model (magnitude
    strategy only; importance and random extraction go straight to masks)."""
    for group in _grouping(cfg, corpus):
        gid = prmod.group_id(group)
        writer = JsonlWriter(run.metrics(f"warmup_{gid}"))
        try:
            params = trainmod.warmup_language(base, group, corpus, cfg.model, cfg.objective,
                                              cfg.train_config("warmup"), cfg.seed,
                                              metrics=writer)
        finally:
            writer.close()
        steps = cfg.train_config("warmup").steps
        warmed = ck.Checkpoint(params=params, opt_state=None,
                               rng_info=trainmod.rng_record(cfg.seed, f"warmup/{gid}", steps),
                               step=steps, stage=f"warmup/{gid}",
                               config_digest=cfg.science_digest())
        ck.save_checkpoint(warmed, run.ckpt_warmup(gid))


def stage_extract_masks(cfg: RunConfig, run: RunPaths, corpus: datamod.Corpus,
                        base: ck.Checkpoint) -> dict[str, prmod.SubnetMask]:
    pr = cfg.pruning
    grouping = _grouping(cfg, corpus)
    temperature = cfg.objective.temperature.at(base.step)

    def warmup_fn(group):
        gid = prmod.group_id(group)
        path = run.ckpt_warmup(gid)
        if not (path / "manifest.json").exists():
            raise PipelineError(f"magnitude extraction needs the warmup stage: missing '{path}'")
        return _load_ckpt(path, f"warmup[{gid}]").params

    def taylor_fn(lang):
        batch_size = cfg.train_config("pretrain").batch_size
        batches = [corpus.sample_batch(lang, "train", batch_size,
                                       rngmod.stream(cfg.seed, "taylor", lang, i)).windows
                   for i in range(int(pr["te_batches"]))]
        return prmod.taylor_scores(base.params, batches, cfg.model, cfg.objective,
                                   temperature, rngmod.stream(cfg.seed, "taylor", lang, "loss"))

    masks = prmod.group_masks(pr["strategy"], grouping, base.params,
                              float(pr["prune_rate"]), pr["scope"],
                              warmup_fn=warmup_fn, taylor_fn=taylor_fn,
                              rng=rngmod.stream(cfg.seed, "random-mask"))
    run.masks_dir.mkdir(parents=True, exist_ok=True)
    for gid, mask in masks.items():
        prmod.save_mask(mask, run.masks_dir / f"{gid}.mask")
    run.grouping_file.write_text(json.dumps({
        "grouping": grouping, "strategy": pr["strategy"], "scope": pr["scope"],
        "prune_rate": pr["prune_rate"]}, indent=2, sort_keys=True))
    return prmod.masks_by_language(masks, grouping)


def load_masks(run: RunPaths) -> dict[str, prmod.SubnetMask]:
    if not run.grouping_file.exists():
        raise PipelineError(f"missing masks at '{run.masks_dir}' (run extract-masks first)")
    grouping = json.loads(run.grouping_file.read_text())["grouping"]
    masks = {prmod.group_id(g): prmod.load_mask(run.masks_dir / f"{prmod.group_id(g)}.mask")
             for g in grouping}
    return prmod.masks_by_language(masks, grouping)


def stage_adapt(cfg: RunConfig, run: RunPaths, corpus: datamod.Corpus,
                base: ck.Checkpoint, masks: dict[str, prmod.SubnetMask]) -> ck.Checkpoint:
    writer = JsonlWriter(run.metrics("adapt"))
    try:
        ckpt = trainmod.adapt_s3net(base, masks, corpus, cfg.model, cfg.objective,
                                    cfg.train_config("adapt"), cfg.seed,
                                    config_digest=cfg.science_digest(), metrics=writer)
    finally:
        writer.close()
    ck.save_checkpoint(ckpt, run.ckpt_adapt)
    return ckpt


def _eval_text(report: an.EvalReport) -> str:
    columns = ["language", "tier", "contrastive", "diversity", "total"]
    rows = [[lang, v["tier"], v["contrastive"], v["diversity"], v["total"]]
            for lang, v in sorted(report.per_language.items())]
    for name in ("high", "low", "all"):
        if name in report.aggregates:
            agg = report.aggregates[name]
            rows.append([f"[{name}]", "", agg["contrastive"], agg["diversity"], agg["total"]])
    return an.render_text_table(columns, rows)


def stage_eval(cfg: RunConfig, run: RunPaths, corpus: datamod.Corpus,
               ckpt: ck.Checkpoint, masks: dict[str, prmod.SubnetMask] | None,
               name: str) -> an.EvalReport:
    report = an.eval_heldout(ckpt.params, masks, corpus, cfg.model, cfg.objective,
                             eval_seed=cfg.eval_seed, split=cfg.eval_split)
    run.reports.mkdir(parents=True, exist_ok=True)
    (run.reports / f"eval_{name}.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True))
    (run.reports / f"eval_{name}.txt").write_text(_eval_text(report))
    return report


def stage_analyze(run: RunPaths, masks: dict[str, prmod.SubnetMask]) -> an.MaskReport:
    report = an.mask_stats(masks)
    run.reports.mkdir(parents=True, exist_ok=True)
    (run.reports / "mask_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True))
    lines = [f"prunable positions: {report.total_prunable}",
             f"dead (pruned everywhere): {report.dead_fraction:.4f}",
             f"shared (kept by >= 2): {report.shared_fraction:.4f}"]
    for lang in report.languages:
        lines.append(f"exclusive[{lang}]: {report.exclusive_fraction[lang]:.4f}")
    lines.append("kept-position IoU:")
    lines.append(an.render_text_table(
        ["lang", *report.languages],
        [[a, *report.overlap_iou[i]] for i, a in enumerate(report.languages)]))
    (run.reports / "mask_report.txt").write_text("\n".join(lines) + "\n")
    return report


def run_pipeline(cfg: RunConfig, run_dir, skip_to: str | None = None) -> dict:
    """Execute the stage graph into ``run_dir``; any failure halts with the
    stage name while earlier artifacts stay on disk."""
    if skip_to is not None and skip_to not in STAGES:
        raise ConfigError(f"--skip-to must be one of {STAGES}, got '{skip_to}'")
    run = RunPaths(run_dir)
    write_effective_config(cfg, run.root)
    corpus = load_corpus(cfg)
    start = STAGES.index(skip_to) if skip_to else 0
    needs_warmup = cfg.pruning["strategy"] == "lth"
    summary: dict = {"run_dir": str(run.root), "stages": []}

    def active(stage: str) -> bool:
        return STAGES.index(stage) >= start

    stage = "pretrain"
    try:
        if active("pretrain"):
            base = stage_pretrain(cfg, run, corpus)
            summary["stages"].append("pretrain")
        else:
            base = _load_ckpt(run.ckpt_pretrain, "pretrain")

        stage = "warmup"
        if active("warmup") and needs_warmup:
            stage_warmup(cfg, run, corpus, base)
            summary["stages"].append("warmup")

        stage = "extract-masks"
        if active("extract-masks"):
            masks = stage_extract_masks(cfg, run, corpus, base)
            summary["stages"].append("extract-masks")
        else:
            masks = load_masks(run)

        stage = "adapt"
        if active("adapt"):
            adapted = stage_adapt(cfg, run, corpus, base, masks)
            summary["stages"].append("adapt")
        else:
            adapted = _load_ckpt(run.ckpt_adapt, "adapt")

        stage = "eval"
        if active("eval"):
            stage_eval(cfg, run, corpus, base, None, "pretrain")
            report = stage_eval(cfg, run, corpus, adapted, masks, "adapt")
            summary["stages"].append("eval")
            summary["eval_adapt_avg"] = report.average_total

        stage = "analyze"
        if active("analyze"):
            mask_report = stage_analyze(run, masks)
            summary["stages"].append("analyze")
            summary["dead_fraction"] = mask_report.dead_fraction
    except (PipelineError, ConfigError):
        raise
    except Exception as exc:
        raise PipelineError(f"stage '{stage}' failed: {exc}") from exc
    return summary


# ---------------------------------------------------------------------------
# sweeps


def sweep_cells(cfg: RunConfig) -> list[dict]:
    """Cartesian grid over the sweep axes (unset axes use the base value)."""
    sw = cfg.effective["sweep"]
    pr = cfg.pruning
    axes = {
        "strategy": sw["strategy"] or [pr["strategy"]],
        "scope": sw["scope"] or [pr["scope"]],
        "prune_rate": sw["prune_rate"] if sw["prune_rate"] is not None else [pr["prune_rate"]],
        "n_masks": sw["n_masks"] if sw["n_masks"] is not None else [pr["n_masks"]],
    }
    cells = []
    for strategy, scope, p, n_masks in product(axes["strategy"], axes["scope"],
                                               axes["prune_rate"], axes["n_masks"]):
        mask_tag = "L" if n_masks is None else str(n_masks)
        cells.append({
            "name": f"{strategy}-{scope}-m{mask_tag}-p{p:g}",
            "strategy": strategy, "scope": scope,
            "prune_rate": float(p), "n_masks": n_masks,
        })
    return cells


def _cell_worker(effective: dict, cell_dir: str, skip_to: str | None) -> dict:
    return run_pipeline(parse_config(effective), cell_dir, skip_to=skip_to)


def run_sweep(cfg: RunConfig, sweep_dir, jobs: int = 1) -> dict:
    """Run the ablation grid with a shared corpus, shared pretraining, and a
    shared evaluation seed; finished cells are skipped on rerun."""
    sweep_dir = Path(sweep_dir)
    cells = sweep_cells(cfg)
    max_cells = int(cfg.effective["sweep"]["max_cells"])
    if len(cells) > max_cells:
        raise ConfigError(
            f"sweep grid has {len(cells)} cells, over the configured budget "
            f"sweep.max_cells={max_cells}; shrink the grid or raise the budget")
    corpus = load_corpus(cfg)

    # shared artifacts: one pretrain; one warmup per group needed by any
    # magnitude-strategy cell (warmup is independent of the prune rate)
    shared = RunPaths(sweep_dir / "shared")
    write_effective_config(cfg, shared.root)
    if not (shared.ckpt_pretrain / "manifest.json").exists():
        base = stage_pretrain(cfg, shared, corpus)
    else:
        base = _load_ckpt(shared.ckpt_pretrain, "shared pretrain")
    warm_groups: set[str] = set()
    for cell in cells:
        if cell["strategy"] != "lth":
            continue
        cell_cfg = cfg.with_overrides(**{k: cell[k] for k in
                                         ("strategy", "scope", "prune_rate", "n_masks")})
        for group in _grouping(cell_cfg, corpus):
            warm_groups.add(prmod.group_id(group))
    for gid in sorted(warm_groups):
        if (shared.ckpt_warmup(gid) / "manifest.json").exists():
            continue
        writer = JsonlWriter(shared.metrics(f"warmup_{gid}"))
        try:
            params = trainmod.warmup_language(base, gid.split("+"), corpus, cfg.model,
                                              cfg.objective, cfg.train_config("warmup"),
                                              cfg.seed, metrics=writer)
        finally:
            writer.close()
        steps = cfg.train_config("warmup").steps
        ck.save_checkpoint(ck.Checkpoint(
            params=params, opt_state=None,
            rng_info=trainmod.rng_record(cfg.seed, f"warmup/{gid}", steps),
            step=steps, stage=f"warmup/{gid}", config_digest=cfg.science_digest()),
            shared.ckpt_warmup(gid))

    jobs_args = []
    results = {}
    for cell in cells:
        cell_dir = sweep_dir / "cells" / cell["name"]
        if (cell_dir / "reports" / "eval_adapt.json").exists():
            results[cell["name"]] = {"run_dir": str(cell_dir), "skipped": True}
            continue
        cell_cfg = cfg.with_overrides(**{k: cell[k] for k in
                                         ("strategy", "scope", "prune_rate", "n_masks")})
        cell_run = RunPaths(cell_dir)
        write_effective_config(cell_cfg, cell_dir)
        if not (cell_run.ckpt_pretrain / "manifest.json").exists():
            shutil.copytree(shared.ckpt_pretrain, cell_run.ckpt_pretrain)
        for gid in sorted(warm_groups):
            src = shared.ckpt_warmup(gid)
            dst = cell_run.ckpt_warmup(gid)
            if src.exists() and not dst.exists():
                shutil.copytree(src, dst)
        jobs_args.append((cell_cfg.effective, str(cell_dir), "extract-masks"))

    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_cell_worker, *args) for args in jobs_args]
            for args, fut in zip(jobs_args, futures):
                results[Path(args[1]).name] = fut.result()
    else:
        for args in jobs_args:
            results[Path(args[1]).name] = _cell_worker(*args)

    cell_dirs = [sweep_dir / "cells" / cell["name"] for cell in cells]
    report = an.sweep_report(cell_dirs)
    (sweep_dir / "sweep.json").write_text(json.dumps(
        {k: v for k, v in report.items() if k not in ("csv", "text")},
        indent=2, sort_keys=True))
    (sweep_dir / "sweep.csv").write_text(report["csv"])
    (sweep_dir / "sweep.txt").write_text(report["text"])
    report["cells"] = results
    return report
