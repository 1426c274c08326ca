"""Training stages: multilingual pretraining, per-language (or per-group)
warmup for magnitude pruning, and masked joint adaptation where each batch
updates only the active language's sub-network.

All stages share one step runner. Randomness is derived per (seed, stage,
step), so a stage resumes bit-exactly from any checkpointed step, and the
adaptation stage reuses the pretraining sampling policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import model as modelmod
from . import objective as objmod
from . import pruning as prmod
from . import rng as rngmod
from .checkpoint import Checkpoint


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, stage: str, step: int, last_parts, cause: str):
        self.stage = stage
        self.step = step
        self.last_parts = last_parts
        last = last_parts.to_dict() if last_parts is not None else None
        super().__init__(
            f"non-finite loss in stage '{stage}' at step {step} ({cause}); "
            f"last finite metrics: {last}")


@dataclass(frozen=True)
class TrainConfig:
    """One stage's optimization settings.

    The desk-scale default peak rate is high by large-model standards; at
    this model size it both trains faster and lets the per-language warmup
    actually reorder weight magnitudes (sub-network extraction needs the
    rankings to diverge between languages).
    """

    steps: int
    batch_size: int = 6
    peak_lr: float = 2.5e-3
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    grad_clip: float | None = 5.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must be in [0, 1]")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("moment decays must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak, then linear decay toward zero."""
    warm = max(1, int(round(cfg.steps * cfg.warmup_frac)))
    if step <= warm:
        return cfg.peak_lr * step / warm
    if cfg.steps == warm:
        return cfg.peak_lr
    return cfg.peak_lr * max(0.0, cfg.steps - step) / (cfg.steps - warm)


def init_opt_state(params: modelmod.ParamTree) -> dict:
    return {
        "m": {n: np.zeros(params.shape(n), dtype=np.float32) for n in params.names()},
        "v": {n: np.zeros(params.shape(n), dtype=np.float32) for n in params.names()},
        "t": 0,
    }


def clip_gradients(grads: dict[str, np.ndarray], clip: float | None) -> tuple[dict, float]:
    """Global-norm clipping; returns (possibly scaled grads, pre-clip norm)."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.square(g, dtype=np.float64).sum())
    norm = float(np.sqrt(sq))
    if clip is not None and norm > clip and norm > 0:
        factor = np.float32(clip / norm)
        grads = {n: g * factor for n, g in grads.items()}
    return grads, norm


def optimizer_step(params: modelmod.ParamTree, grads: dict[str, np.ndarray], state: dict,
                   lr: float, cfg: TrainConfig,
                   keep_mask: dict[str, np.ndarray] | None = None) -> None:
    """Adaptive-moment update with bias correction, in place.

    With ``keep_mask``, positions whose bit is 0 keep their weight and both
    moments bit-identical (the whole update is gated, not just the gradient).
    """
    state["t"] += 1
    t = state["t"]
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    bc1 = np.float32(1.0 / (1.0 - cfg.beta1 ** t))
    bc2 = np.float32(1.0 / (1.0 - cfg.beta2 ** t))
    lr32 = np.float32(lr)
    eps = np.float32(cfg.eps)
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(tensor.shape, dtype=np.float32)
        elif g.size and not np.isfinite(g.sum(dtype=np.float64)):
            raise ad.NonFiniteError(f"non-finite gradient for parameter '{name}'")
        m = state["m"][name]
        v = state["v"][name]
        new_m = b1 * m + (np.float32(1.0) - b1) * g
        new_v = b2 * v + (np.float32(1.0) - b2) * (g * g)
        update = lr32 * (new_m * bc1) / (np.sqrt(new_v * bc2) + eps)
        new_w = tensor.data - update
        bits = keep_mask.get(name) if keep_mask else None
        if bits is not None:
            new_m = np.where(bits, new_m, m)
            new_v = np.where(bits, new_v, v)
            new_w = np.where(bits, new_w, tensor.data)
        state["m"][name] = new_m
        state["v"][name] = new_v
        tensor.data = new_w


def stage_language(sampler_specs: Sequence[datamod.LanguageSpec], root_seed: int,
                   stage: str, step: int) -> str:
    """The language drawn for a step: two-stage tiered multinomial (natural
    high-resource sampling, tempered low-resource) from a per-step stream."""
    rng = rngmod.stream(root_seed, stage, "lang", step)
    return datamod.tiered_language_sampler(sampler_specs, rng)


def run_stage(params: modelmod.ParamTree, corpus: datamod.Corpus,
              model_cfg: modelmod.ModelConfig, obj_cfg: objmod.ObjectiveConfig,
              train_cfg: TrainConfig, root_seed: int, stage: str,
              languages: Sequence[str] | None = None,
              masks: dict[str, prmod.SubnetMask] | None = None,
              opt_state: dict | None = None, start_step: int = 0,
              stop_step: int | None = None,
              metrics: Callable[[dict], None] | None = None) -> tuple[dict, objmod.LossParts]:
    """Run optimization steps start_step+1 .. steps on ``params`` in place.

    ``languages`` restricts sampling to a subset (monolingual/group warmup);
    ``masks`` routes every batch through the active language's sub-network
    view and gates the update to its kept positions. ``stop_step`` pauses a
    run early without changing the schedule (for checkpointing mid-stage).
    """
    specs = corpus.sampler_specs()
    if languages is not None:
        keep = set(languages)
        unknown = keep - {s.id for s in specs}
        if unknown:
            raise KeyError(f"unknown language(s) {sorted(unknown)} in corpus")
        specs = [s for s in specs if s.id in keep]
    if masks is not None:
        missing = [s.id for s in specs if s.id not in masks]
        if missing:
            raise ValueError(f"no sub-network mask for language(s) {missing}")
    if opt_state is None:
        opt_state = init_opt_state(params)

    last = train_cfg.steps if stop_step is None else min(stop_step, train_cfg.steps)
    last_parts: objmod.LossParts | None = None
    for step in range(start_step + 1, last + 1):
        lang = stage_language(specs, root_seed, stage, step)
        rng_step = rngmod.stream(root_seed, stage, "batch", step)
        batch = corpus.sample_batch(lang, "train", train_cfg.batch_size, rng_step,
                                    seed_lineage=rngmod.lineage(root_seed, stage, "batch", step))
        temperature = obj_cfg.temperature.at(step - 1)
        tree = prmod.apply_mask(params, masks[lang]) if masks is not None else params
        try:
            loss, parts = objmod.total_loss(batch.windows, tree, model_cfg, obj_cfg,
                                            temperature, rng_step)
            grads = params.grad_map(ad.backward(loss))
        except ad.NonFiniteError as exc:
            raise DivergenceError(stage, step, last_parts, str(exc)) from exc
        grads, grad_norm = clip_gradients(grads, train_cfg.grad_clip)
        lr = learning_rate(train_cfg, step)
        optimizer_step(params, grads, opt_state, lr, cfg=train_cfg,
                       keep_mask=masks[lang].entries if masks is not None else None)
        last_parts = parts
        if metrics is not None:
            metrics({"stage": stage, "step": step, "language": lang, "lr": lr,
                     "grad_norm": grad_norm, "temperature": temperature,
                     **parts.to_dict()})
    assert last_parts is not None
    return opt_state, last_parts


def rng_record(root_seed: int, stage: str, step: int) -> dict:
    """The checkpointed RNG state: with per-step named derivation the triple
    (root seed, stage, step) fully determines every later draw."""
    return {"scheme": "per-step-derived", "root_seed": root_seed,
            "stage": stage, "step": step}


def pretrain(corpus: datamod.Corpus, model_cfg: modelmod.ModelConfig,
             obj_cfg: objmod.ObjectiveConfig, train_cfg: TrainConfig, seed: int,
             config_digest: str = "", metrics: Callable[[dict], None] | None = None,
             resume: Checkpoint | None = None, stop_step: int | None = None) -> Checkpoint:
    """Multilingual contrastive pretraining from fresh (or resumed) state."""
    if resume is not None:
        params = resume.params.copy()
        opt_state = resume.opt_state
        start_step = resume.step
    else:
        params = modelmod.init_params(model_cfg, rngmod.derive_seed(seed, "init"))
        opt_state = None
        start_step = 0
    last = train_cfg.steps if stop_step is None else min(stop_step, train_cfg.steps)
    opt_state, _ = run_stage(params, corpus, model_cfg, obj_cfg, train_cfg, seed,
                             stage="pretrain", opt_state=opt_state,
                             start_step=start_step, stop_step=stop_step, metrics=metrics)
    return Checkpoint(params=params, opt_state=opt_state,
                      rng_info=rng_record(seed, "pretrain", last),
                      step=last, stage="pretrain", config_digest=config_digest)


def warmup_language(base: Checkpoint, languages: Sequence[str] | str,
                    corpus: datamod.Corpus, model_cfg: modelmod.ModelConfig,
                    obj_cfg: objmod.ObjectiveConfig, train_cfg: TrainConfig, seed: int,
                    metrics: Callable[[dict], None] | None = None) -> modelmod.ParamTree:
    """Clone the base model and train it on one language (or language group)
    only; the base checkpoint is untouched. The returned tree exists to be
    magnitude-scored and discarded -- adaptation restarts from the base."""
    if isinstance(languages, str):
        languages = [languages]
    group = prmod.group_id(languages)
    params = base.params.copy()
    run_stage(params, corpus, model_cfg, obj_cfg, train_cfg, seed,
              stage=f"warmup/{group}", languages=languages, metrics=metrics)
    return params


def dead_positions(masks: dict[str, prmod.SubnetMask]) -> dict[str, np.ndarray]:
    """Positions pruned by every language's mask (empty connections)."""
    langs = sorted(masks)
    names = sorted(masks[langs[0]].entries)
    return {n: ~np.logical_or.reduce([masks[l].entries[n] for l in langs]) for n in names}


def adapt_s3net(base: Checkpoint, masks: dict[str, prmod.SubnetMask],
                corpus: datamod.Corpus, model_cfg: modelmod.ModelConfig,
                obj_cfg: objmod.ObjectiveConfig, train_cfg: TrainConfig, seed: int,
                config_digest: str = "", metrics: Callable[[dict], None] | None = None,
                resume: Checkpoint | None = None) -> Checkpoint:
    """Joint adaptation of the sparsely shared sub-networks.

    Batches stay monolingual and follow the pretraining sampling policy; a
    batch of language l runs forward through its masked view and updates only
    positions its mask keeps. Weights pruned by every language are zeroed
    once at the start (they are dead in the final model); a weight pruned by
    one language but kept by another retains its value and trains there.
    Optimizer moments start fresh.
    """
    missing = [l for l in corpus.languages if l not in masks]
    if missing:
        raise ValueError(f"no sub-network mask for language(s) {missing}")
    if resume is not None:
        params = resume.params.copy()
        opt_state = resume.opt_state
        start_step = resume.step
    else:
        params = base.params.copy()
        for name, dead in dead_positions(masks).items():
            if dead.any():
                params.set_array(name, np.where(dead, np.float32(0.0), params.array(name)))
        opt_state = None
        start_step = 0
    opt_state, _ = run_stage(params, corpus, model_cfg, obj_cfg, train_cfg, seed,
                             stage="adapt", masks=masks, opt_state=opt_state,
                             start_step=start_step, metrics=metrics)
    return Checkpoint(params=params, opt_state=opt_state,
                      rng_info=rng_record(seed, "adapt", train_cfg.steps),
                      step=train_cfg.steps, stage="adapt", config_digest=config_digest)
