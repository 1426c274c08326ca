"""Pretraining objective: span time-masking, distractor sampling, the
contrastive term over cosine similarities, and the codebook diversity term.

All sampling draws from an explicit generator in a documented order (see
:func:`total_loss`), so a same-seeded generator replays a batch exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as modelmod


@dataclass(frozen=True)
class MaskSpec:
    """Span time-masking parameters: each frame independently starts a span
    of ``span`` frames with probability ``start_prob``."""

    start_prob: float = 0.065
    span: int = 10

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError(f"start_prob must be in [0, 1], got {self.start_prob}")
        if self.span < 1:
            raise ValueError(f"span must be >= 1, got {self.span}")


@dataclass(frozen=True)
class TemperatureSchedule:
    """Multiplicative Gumbel temperature decay with a floor."""

    start: float = 2.0
    floor: float = 0.5
    decay: float = 0.9995

    def __post_init__(self):
        if self.start <= 0 or self.floor <= 0 or not 0 < self.decay <= 1:
            raise ValueError("temperature schedule values must be positive (decay in (0,1])")

    def at(self, step: int) -> float:
        return max(self.floor, self.start * self.decay ** max(0, step))


@dataclass(frozen=True)
class ObjectiveConfig:
    """Loss constants: masking, distractor count, similarity temperature
    kappa, diversity weight, and the quantizer temperature schedule."""

    mask: MaskSpec = MaskSpec()
    distractors_k: int = 10
    kappa: float = 0.1
    diversity_weight: float = 0.1
    temperature: TemperatureSchedule = TemperatureSchedule()

    def __post_init__(self):
        if self.distractors_k < 1:
            raise ValueError("distractors_k must be >= 1")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if self.diversity_weight < 0:
            raise ValueError("diversity_weight must be >= 0")


@dataclass
class LossParts:
    """Scalar decomposition of one batch loss."""

    contrastive: float
    diversity: float
    total: float
    kappa: float
    diversity_weight: float
    n_masked: int
    code_perplexity: float
    distractor_replacements: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sample_time_mask(t_frames: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Sample the masked index set: every frame is a span start with
    probability ``start_prob``; spans [t, t+span) are unioned and clipped."""
    if t_frames < 1:
        raise ValueError(f"t_frames must be >= 1, got {t_frames}")
    starts = np.flatnonzero(rng.random(t_frames) < spec.start_prob)
    mask = np.zeros(t_frames, dtype=bool)
    for s in starts:
        mask[s:s + spec.span] = True
    return np.flatnonzero(mask)


def sample_distractors(masked, t: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Draw k distractor indices uniformly from the other masked steps.

    Returns (indices, with_replacement); sampling falls back to replacement
    when fewer than k candidates exist. Raises when t is the only masked step.
    """
    masked = np.asarray(sorted(masked), dtype=np.intp)
    if t not in masked:
        raise ValueError(f"t={t} is not a masked step")
    candidates = masked[masked != t]
    if candidates.size == 0:
        raise ValueError(f"no distractor available: t={t} is the only masked step")
    if candidates.size >= k:
        return rng.choice(candidates, size=k, replace=False), False
    return rng.choice(candidates, size=k, replace=True), True


def _contrastive_terms(c: ad.Tensor, q: ad.Tensor, outer_idx: np.ndarray, time_idx: np.ndarray,
                       cand_time_idx: np.ndarray, kappa: float) -> ad.Tensor:
    """Per-term losses -log softmax(sim/kappa) for candidates with the
    positive in column 0. Shapes: outer/time (n,), cand_time (n, 1+k)."""
    n, m = cand_time_idx.shape
    c_sel = ad.l2_normalize(ad.gather_rows(c, outer_idx, time_idx))
    cand = ad.gather_rows(q, np.repeat(outer_idx, m), cand_time_idx.reshape(-1))
    cand = ad.l2_normalize(ad.reshape(cand, (n, m, cand.shape[-1])))
    sims = ad.reshape(ad.matmul(cand, ad.reshape(c_sel, (n, c_sel.shape[-1], 1))), (n, m))
    logits = ad.scale(sims, 1.0 / kappa)
    pos = ad.gather_rows(logits, np.arange(n, dtype=np.intp), np.zeros(n, dtype=np.intp))
    return ad.sub(ad.log_sum_exp(logits), pos)


def contrastive_loss(c, q, masked, distractors: dict, kappa: float) -> ad.Tensor:
    """Mean over masked steps t of -log[ exp(sim(c_t,q_t)/kappa) /
    sum over {q_t} u Q_t of exp(sim(c_t, q~)/kappa) ], cosine similarity,
    positive included in the denominator."""
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    c = c if isinstance(c, ad.Tensor) else ad.constant(np.asarray(c))
    q = q if isinstance(q, ad.Tensor) else ad.constant(np.asarray(q))
    if c.ndim != 2 or q.ndim != 2:
        raise ad.ShapeError("contrastive_loss expects (T, d) sequences")
    cb = ad.reshape(c, (1,) + c.shape)
    qb = ad.reshape(q, (1,) + q.shape)
    masked = sorted(int(t) for t in masked)
    if not masked:
        raise ValueError("masked set is empty")
    rows = []
    for t in masked:
        if t not in distractors:
            raise ValueError(f"masked step {t} has no distractor set")
        rows.append([t, *np.asarray(distractors[t], dtype=np.intp)])
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError("all distractor sets must have equal size")
    cand = np.asarray(rows, dtype=np.intp)
    n = cand.shape[0]
    zeros = np.zeros(n, dtype=np.intp)
    terms = _contrastive_terms(cb, qb, zeros, np.asarray(masked, dtype=np.intp), cand, kappa)
    return ad.reduce_mean(terms)


def diversity_loss(usage) -> ad.Tensor:
    """(1/(G*V)) * sum over codebooks and entries of p*log(p): the negative
    entropy of the usage table, scaled; minimized at uniform usage where it
    equals -ln(V)/V, and at most 0 (one-hot rows)."""
    u = usage if isinstance(usage, ad.Tensor) else ad.constant(np.asarray(usage))
    if u.ndim != 2:
        raise ad.ShapeError(f"usage table must be (G, V), got {u.shape}")
    g, v = u.shape
    rows = u.data.sum(axis=-1)
    if np.any(np.abs(rows - 1.0) > 1e-5):
        raise ValueError(f"usage rows must sum to 1 within 1e-5, got sums {rows}")
    if np.any(u.data < 0):
        raise ValueError("usage entries must be >= 0")
    return ad.scale(ad.reduce_sum(ad.xlogx(u)), 1.0 / (g * v))


def code_perplexity(usage: np.ndarray) -> float:
    """exp of the mean per-codebook entropy of the usage table."""
    p = np.asarray(usage, dtype=np.float64)
    ent = -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum(axis=-1)
    return float(np.exp(ent.mean()))


def plan_batch_masks(n_utts: int, t_frames: int, spec: MaskSpec, k: int,
                     rng: np.random.Generator, min_spans: int = 1):
    """Draw the per-utterance masking/distractor plan for a batch.

    Draw order (fixed; a same-seeded generator replays it exactly):
    per utterance, the time-mask starts, then one forced uniform start if the
    mask came out empty and ``min_spans`` > 0; afterwards, per utterance and
    per masked step in ascending order, the distractor set.

    Returns (mask_bool (B,T), per-utterance masked index arrays,
    per-utterance {t: distractor indices}, replacement event count).
    """
    mask_bool = np.zeros((n_utts, t_frames), dtype=bool)
    masked_idx: list[np.ndarray] = []
    for b in range(n_utts):
        idx = sample_time_mask(t_frames, spec, rng)
        if idx.size == 0 and min_spans > 0:
            start = int(rng.integers(t_frames))
            full = np.zeros(t_frames, dtype=bool)
            full[start:start + spec.span] = True
            idx = np.flatnonzero(full)
        masked_idx.append(idx)
        mask_bool[b, idx] = True
    distractors: list[dict[int, np.ndarray]] = []
    replacements = 0
    for b in range(n_utts):
        per_t: dict[int, np.ndarray] = {}
        if masked_idx[b].size >= 2:
            for t in masked_idx[b]:
                d, replaced = sample_distractors(masked_idx[b], int(t), k, rng)
                per_t[int(t)] = d
                replacements += int(replaced)
        distractors.append(per_t)
    return mask_bool, masked_idx, distractors, replacements


def total_loss(waveforms, params, model_cfg: modelmod.ModelConfig, obj_cfg: ObjectiveConfig,
               temperature: float, rng: np.random.Generator,
               plan=None, hard: bool = True) -> tuple[ad.Tensor, LossParts]:
    """Full batch loss: contrastive + diversity_weight * diversity.

    ``waveforms`` is a (B, L) array of equal-length windows. Per-utterance
    contrastive means are averaged over the utterances that have at least
    one valid term; the diversity term uses the batch-level usage table.
    Randomness comes from ``rng`` in the order: masking plan (see
    :func:`plan_batch_masks`), then quantizer noise.

    ``hard=False`` swaps the quantizer's one-hot selection for its soft
    distribution; gradients are identical (straight-through), so this is the
    configuration finite-difference checks run against.
    """
    waves = np.asarray(waveforms)
    if waves.ndim != 2 or waves.shape[0] == 0:
        raise ValueError(f"waveforms must be a nonempty (B, L) batch, got shape {waves.shape}")
    b = waves.shape[0]
    t_frames = modelmod.num_frames(model_cfg, waves.shape[1])

    if plan is None:
        plan = plan_batch_masks(b, t_frames, obj_cfg.mask, obj_cfg.distractors_k, rng)
    mask_bool, masked_idx, distractors, replacements = plan

    z = modelmod.feature_encode(waves, params, model_cfg)
    q, usage = modelmod.quantize(z, params, model_cfg, temperature, rng, hard=hard)
    c = modelmod.contextualize(z, mask_bool, params, model_cfg)

    outer, times, cands, weights = [], [], [], []
    n_utts_with_terms = 0
    for ub in range(b):
        per_t = distractors[ub]
        if not per_t:
            continue
        n_utts_with_terms += 1
        for t in sorted(per_t):
            outer.append(ub)
            times.append(t)
            cands.append([t, *per_t[t]])
    if not outer:
        raise ValueError("no contrastive terms in batch: every utterance mask is degenerate")
    per_utt = np.bincount(np.asarray(outer), minlength=b)
    weights = 1.0 / (n_utts_with_terms * per_utt[np.asarray(outer)])

    terms = _contrastive_terms(c, q, np.asarray(outer, dtype=np.intp),
                               np.asarray(times, dtype=np.intp),
                               np.asarray(cands, dtype=np.intp), obj_cfg.kappa)
    contrastive = ad.reduce_sum(ad.mul(terms, ad.constant(weights.astype(terms.dtype))))
    diversity = diversity_loss(usage)
    total = ad.add(contrastive, ad.scale(diversity, obj_cfg.diversity_weight))

    parts = LossParts(
        contrastive=float(contrastive.data),
        diversity=float(diversity.data),
        total=float(total.data),
        kappa=obj_cfg.kappa,
        diversity_weight=obj_cfg.diversity_weight,
        n_masked=len(outer),
        code_perplexity=code_perplexity(usage.data),
        distractor_replacements=replacements,
    )
    return total, parts
