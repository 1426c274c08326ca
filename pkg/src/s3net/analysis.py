"""Mask structure analytics and paired held-out evaluation.

Mask statistics are exact combinatorial counts over the prunable set:
per-layer densities, pairwise intersection-over-union of kept positions,
dead weights (pruned by every language), and per-language exclusive
fractions. Held-out evaluation computes the pretraining loss with a fixed
evaluation seed per utterance, so reports for different checkpoints are
paired and directly comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import model as modelmod
from . import objective as objmod
from . import pruning as prmod
from . import rng as rngmod


@dataclass
class MaskReport:
    """Exact structure statistics for a set of per-language masks."""

    languages: list[str]
    per_layer_density: dict[str, dict[str, float]]  # language -> layer -> kept fraction
    overlap_iou: list[list[float]]                  # kept-position IoU, language order
    dead_fraction: float                            # pruned by every language
    exclusive_fraction: dict[str, float]            # kept by exactly that language
    shared_fraction: float                          # kept by >= 2 languages
    usage_histogram: dict[int, float]               # kept-by-k-languages fractions
    total_prunable: int

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["usage_histogram"] = {str(k): v for k, v in self.usage_histogram.items()}
        return d


def mask_stats(masks: dict[str, prmod.SubnetMask]) -> MaskReport:
    """Exact counts, no sampling. All masks must share one entry signature."""
    if not masks:
        raise ValueError("no masks given")
    langs = sorted(masks)
    names = sorted(masks[langs[0]].entries)
    for lang in langs:
        entries = masks[lang].entries
        if sorted(entries) != names or any(
                entries[n].shape != masks[langs[0]].entries[n].shape for n in names):
            raise ValueError(f"mask for '{lang}' misaligned with the others")

    flat = {lang: np.concatenate([masks[lang].entries[n].reshape(-1) for n in names])
            for lang in langs}
    total = int(flat[langs[0]].size)

    density = {lang: {n: float(masks[lang].entries[n].mean()) for n in names}
               for lang in langs}

    iou = [[1.0] * len(langs) for _ in langs]
    for i, a in enumerate(langs):
        for j in range(i + 1, len(langs)):
            b = langs[j]
            inter = int((flat[a] & flat[b]).sum())
            union = int((flat[a] | flat[b]).sum())
            val = inter / union if union else 1.0
            iou[i][j] = iou[j][i] = val

    counts = np.zeros(total, dtype=np.int32)
    for lang in langs:
        counts += flat[lang]
    dead = float((counts == 0).mean())
    shared = float((counts >= 2).mean())
    exclusive = {lang: float(((counts == 1) & flat[lang]).mean()) for lang in langs}
    histogram = {int(k): float((counts == k).mean()) for k in range(len(langs) + 1)}

    return MaskReport(languages=langs, per_layer_density=density, overlap_iou=iou,
                      dead_fraction=dead, exclusive_fraction=exclusive,
                      shared_fraction=shared, usage_histogram=histogram,
                      total_prunable=total)


@dataclass
class EvalReport:
    """Per-language held-out loss decomposition plus tier aggregates."""

    per_language: dict[str, dict]
    aggregates: dict[str, dict]       # high / low / all -> mean over member languages
    eval_seed: int
    split: str
    masked: bool
    checkpoint_digest: str
    corpus_digest: str
    skipped_utterances: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @property
    def average_total(self) -> float:
        return self.aggregates["all"]["total"]


_AGG_FIELDS = ("contrastive", "diversity", "total")


def _aggregate(members: list[dict]) -> dict:
    return {f: float(np.mean([m[f] for m in members])) for f in _AGG_FIELDS}


def eval_heldout(params: modelmod.ParamTree, masks: dict[str, prmod.SubnetMask] | None,
                 corpus: datamod.Corpus, model_cfg: modelmod.ModelConfig,
                 obj_cfg: objmod.ObjectiveConfig, eval_seed: int,
                 split: str = "valid") -> EvalReport:
    """Mean pretraining loss per language on a held-out split.

    Each utterance is evaluated alone with a stream derived from
    (eval_seed, language, index): time masks, distractors and quantizer
    noise are fixed, so two checkpoints evaluated with the same seed are
    compared on identical terms. With masks, language l is scored through
    its sub-network view. The rare utterance whose forced mask span
    degenerates to a single step has no distractor and is skipped
    (deterministically, the same ones for every checkpoint).
    """
    temperature = obj_cfg.temperature.floor
    per_language: dict[str, dict] = {}
    skipped = 0
    for lang in corpus.languages:
        windows = corpus.windows(lang, split)
        if windows.shape[0] == 0:
            raise ValueError(f"empty '{split}' split for language '{lang}'")
        tree = prmod.apply_mask(params, masks[lang]) if masks is not None else params
        sums = {f: 0.0 for f in _AGG_FIELDS}
        n = 0
        with ad.no_grad():
            for i in range(windows.shape[0]):
                rng = rngmod.stream(eval_seed, "eval", lang, i)
                try:
                    _, parts = objmod.total_loss(windows[i:i + 1], tree, model_cfg,
                                                 obj_cfg, temperature, rng)
                except ValueError:
                    skipped += 1
                    continue
                for f in _AGG_FIELDS:
                    sums[f] += getattr(parts, f)
                n += 1
        if n == 0:
            raise ValueError(f"all utterances skipped for language '{lang}'")
        per_language[lang] = {f: sums[f] / n for f in _AGG_FIELDS}
        per_language[lang]["n_utterances"] = n
        per_language[lang]["tier"] = corpus.tier(lang)

    aggregates = {"all": _aggregate(list(per_language.values()))}
    for tier in datamod.TIERS:
        members = [v for v in per_language.values() if v["tier"] == tier]
        if members:
            aggregates[tier] = _aggregate(members)
    return EvalReport(per_language=per_language, aggregates=aggregates,
                      eval_seed=eval_seed, split=split, masked=masks is not None,
                      checkpoint_digest=params.digest(), corpus_digest=corpus.digest(),
                      skipped_utterances=skipped)


# ---------------------------------------------------------------------------
# sweep comparison tables


def _fmt(x):
    return f"{x:.5f}" if isinstance(x, float) else str(x)


def render_text_table(columns: list[str], rows: list[list]) -> str:
    cells = [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    header = "  ".join(c.rjust(w) for c, w in zip(columns, widths))
    lines = [header, "-" * len(header)]
    for row in cells:
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def render_csv(columns: list[str], rows: list[list]) -> str:
    out = [",".join(columns)]
    for row in rows:
        out.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(out) + "\n"


def sweep_report(run_dirs: list) -> dict:
    """Collect one comparison table from a set of finished run directories.

    Every run must share the corpus and evaluation seed (paired
    comparisons); rows are sorted by (strategy, scope, #masks, prune rate)
    and deltas are taken against the prune_rate == 0 control when present.
    """
    cells = []
    for d in run_dirs:
        d = Path(d)
        cfg = json.loads((d / "config.json").read_text())
        rep = json.loads((d / "reports" / "eval_adapt.json").read_text())
        cells.append((d, cfg, rep))
    if not cells:
        raise ValueError("no runs given")
    seeds = {rep["eval_seed"] for _, _, rep in cells}
    digests = {rep["corpus_digest"] for _, _, rep in cells}
    if len(seeds) != 1 or len(digests) != 1:
        raise ValueError("comparisons must be paired: runs differ in eval seed or corpus")

    rows = []
    for d, cfg, rep in cells:
        pruning = cfg["pruning"]
        row = {
            "run": d.name,
            "strategy": pruning["strategy"],
            "scope": pruning["scope"],
            "n_masks": "L" if pruning["n_masks"] is None else int(pruning["n_masks"]),
            "prune_rate": pruning["prune_rate"],
            "high": rep["aggregates"].get("high", {}).get("total", float("nan")),
            "low": rep["aggregates"].get("low", {}).get("total", float("nan")),
            "avg": rep["aggregates"]["all"]["total"],
        }
        rows.append(row)
    rows.sort(key=lambda r: (r["strategy"], r["scope"], str(r["n_masks"]), r["prune_rate"]))

    control = next((r for r in rows if r["prune_rate"] == 0.0), None)
    for r in rows:
        r["delta_vs_control"] = (r["avg"] - control["avg"]) if control else float("nan")

    columns = ["run", "strategy", "scope", "n_masks", "prune_rate",
               "high", "low", "avg", "delta_vs_control"]
    table_rows = [[r[c] for c in columns] for r in rows]
    return {
        "eval_seed": cells[0][2]["eval_seed"],
        "corpus_digest": cells[0][2]["corpus_digest"],
        "control_run": control["run"] if control else None,
        "rows": rows,
        "csv": render_csv(columns, table_rows),
        "text": render_text_table(columns, table_rows),
    }
