"""Sub-network extraction: importance scoring (weight magnitude, first-order
Taylor expansion, random control), bottom-k mask extraction in layerwise or
global scope, mask grouping over language partitions, and the packed mask
file format.

Masks cover exactly the prunable parameter set (the ``context_linear``
section); all other parameters are implicitly kept. A mask stores keep-bits:
1 = parameter participates in the language's sub-network, 0 = pruned.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as modelmod
from . import objective as objmod

STRATEGIES = ("lth", "te", "random")
SCOPES = ("layerwise", "global")

_MASK_MAGIC = b"SUBNETM1"


@dataclass
class ImportanceTable:
    """Nonnegative per-parameter scores over the prunable set."""

    scores: dict[str, np.ndarray]
    provenance: str  # magnitude | taylor | random

    def aligned_with(self, params: modelmod.ParamTree) -> bool:
        prunable = params.prunable_names()
        return (sorted(self.scores) == sorted(prunable)
                and all(self.scores[n].shape == params.shape(n) for n in prunable))


@dataclass(frozen=True)
class SubnetMask:
    """Immutable per-group keep-bit arrays aligned to the prunable set."""

    entries: dict[str, np.ndarray]  # name -> bool array, True = keep
    group: str
    prune_rate: float
    scope: str
    strategy: str

    def __post_init__(self):
        for name, bits in self.entries.items():
            if bits.dtype != np.bool_:
                raise ValueError(f"mask entry '{name}' must be boolean")
            bits.setflags(write=False)

    def zeros(self, name: str) -> int:
        return int((~self.entries[name]).sum())

    def total_zeros(self) -> int:
        return sum(self.zeros(n) for n in self.entries)

    def total_size(self) -> int:
        return sum(b.size for b in self.entries.values())

    def density(self) -> float:
        n = self.total_size()
        return 1.0 - self.total_zeros() / n if n else 1.0


def all_ones_mask(params: modelmod.ParamTree, group: str = "all") -> SubnetMask:
    entries = {n: np.ones(params.shape(n), dtype=bool) for n in params.prunable_names()}
    return SubnetMask(entries=entries, group=group, prune_rate=0.0,
                      scope="layerwise", strategy="lth")


def magnitude_scores(params: modelmod.ParamTree) -> ImportanceTable:
    """Importance = |weight| over the prunable set."""
    scores = {n: np.abs(params.array(n)).astype(np.float64) for n in params.prunable_names()}
    return ImportanceTable(scores=scores, provenance="magnitude")


def taylor_scores(params: modelmod.ParamTree, batches: Iterable[np.ndarray],
                  model_cfg: modelmod.ModelConfig, obj_cfg: objmod.ObjectiveConfig,
                  temperature: float, rng: np.random.Generator,
                  n_batches: int | None = None) -> ImportanceTable:
    """First-order importance: mean over batches of (gradient * weight)^2.

    Parameters are frozen: scoring reads gradients of the batch loss but
    never updates the tree (verified by content hash).
    """
    before = params.digest()
    prunable = params.prunable_names()
    acc = {n: np.zeros(params.shape(n), dtype=np.float64) for n in prunable}
    count = 0
    for waves in batches:
        if n_batches is not None and count >= n_batches:
            break
        loss, _ = objmod.total_loss(waves, params, model_cfg, obj_cfg, temperature, rng)
        grads = params.grad_map(ad.backward(loss))
        for n in prunable:
            g = grads.get(n)
            if g is not None:
                gt = g.astype(np.float64) * params.array(n).astype(np.float64)
                acc[n] += gt * gt
        count += 1
    if count == 0:
        raise ValueError("taylor_scores: empty data stream")
    if params.digest() != before:
        raise RuntimeError("taylor_scores mutated the parameter tree")
    return ImportanceTable(scores={n: acc[n] / count for n in prunable}, provenance="taylor")


def _check_rate_scope(p: float, scope: str) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"prune rate must be in [0, 1), got {p}")
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got '{scope}'")


def zero_count(p: float, n: int) -> int:
    """floor(p * n) with a guard against float representation error
    (0.3 * 10 must prune 3, not 2)."""
    return int(np.floor(np.float64(p) * n + 1e-9))


def extract_mask(scores: ImportanceTable, p: float, scope: str,
                 group: str = "all", strategy: str | None = None) -> SubnetMask:
    """Prune the floor(p * n) lowest-scoring positions, per entry (layerwise)
    or over the whole prunable set (global). Ties break by ascending
    (entry name, flat index); extraction is deterministic.
    """
    _check_rate_scope(p, scope)
    names = sorted(scores.scores)
    entries: dict[str, np.ndarray] = {}
    if scope == "layerwise":
        for name in names:
            flat = scores.scores[name].reshape(-1)
            k = zero_count(p, flat.size)
            keep = np.ones(flat.size, dtype=bool)
            if k:
                order = np.argsort(flat, kind="stable")
                keep[order[:k]] = False
            entries[name] = keep.reshape(scores.scores[name].shape)
    else:
        flat_all = np.concatenate([scores.scores[n].reshape(-1) for n in names])
        k = zero_count(p, flat_all.size)
        keep_all = np.ones(flat_all.size, dtype=bool)
        if k:
            order = np.argsort(flat_all, kind="stable")
            keep_all[order[:k]] = False
        offset = 0
        for name in names:
            size = scores.scores[name].size
            entries[name] = keep_all[offset:offset + size].reshape(scores.scores[name].shape)
            offset += size
    inferred = {"magnitude": "lth", "taylor": "te", "random": "random"}.get(scores.provenance, "lth")
    return SubnetMask(entries=entries, group=group, prune_rate=p, scope=scope,
                      strategy=strategy or inferred)


def random_mask(params: modelmod.ParamTree, p: float, scope: str,
                rng: np.random.Generator, group: str = "all") -> SubnetMask:
    """Uniformly random zero positions meeting the exact per-scope counts."""
    _check_rate_scope(p, scope)
    names = sorted(params.prunable_names())
    entries: dict[str, np.ndarray] = {}
    if scope == "layerwise":
        for name in names:
            size = params.array(name).size
            k = zero_count(p, size)
            keep = np.ones(size, dtype=bool)
            if k:
                keep[rng.choice(size, size=k, replace=False)] = False
            entries[name] = keep.reshape(params.shape(name))
    else:
        sizes = [params.array(n).size for n in names]
        total = int(np.sum(sizes))
        k = zero_count(p, total)
        keep_all = np.ones(total, dtype=bool)
        if k:
            keep_all[rng.choice(total, size=k, replace=False)] = False
        offset = 0
        for name, size in zip(names, sizes):
            entries[name] = keep_all[offset:offset + size].reshape(params.shape(name))
            offset += size
    return SubnetMask(entries=entries, group=group, prune_rate=p, scope=scope, strategy="random")


def group_id(languages: Sequence[str]) -> str:
    return "+".join(sorted(languages))


def check_partition(grouping: Sequence[Sequence[str]], languages: Sequence[str]) -> None:
    flat = [l for g in grouping for l in g]
    if any(len(g) == 0 for g in grouping):
        raise ValueError("empty group in grouping")
    if sorted(flat) != sorted(languages):
        raise ValueError(f"grouping {grouping} is not a partition of {sorted(languages)}")


def group_masks(strategy: str, grouping: Sequence[Sequence[str]],
                params: modelmod.ParamTree, p: float, scope: str,
                warmup_fn: Callable[[Sequence[str]], modelmod.ParamTree] | None = None,
                taylor_fn: Callable[[str], ImportanceTable] | None = None,
                rng: np.random.Generator | None = None) -> dict[str, SubnetMask]:
    """Extract one mask per language group.

    * lth: warm the shared model up on the group's mixed data
      (``warmup_fn(group_languages)``), then magnitude-prune the result;
    * te: average the per-language Taylor tables (``taylor_fn(language)``)
      within each group, then prune;
    * random: one random mask per group.

    A single group of all languages yields one shared mask; singleton groups
    reproduce per-language extraction.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got '{strategy}'")
    languages = [l for g in grouping for l in g]
    check_partition(grouping, languages)
    masks: dict[str, SubnetMask] = {}
    for group in grouping:
        gid = group_id(group)
        if strategy == "lth":
            if warmup_fn is None:
                raise ValueError("lth grouping requires warmup_fn")
            warmed = warmup_fn(tuple(group))
            masks[gid] = extract_mask(magnitude_scores(warmed), p, scope, group=gid,
                                      strategy="lth")
        elif strategy == "te":
            if taylor_fn is None:
                raise ValueError("te grouping requires taylor_fn")
            tables = [taylor_fn(lang) for lang in group]
            names = sorted(tables[0].scores)
            avg = {n: np.mean([t.scores[n] for t in tables], axis=0) for n in names}
            masks[gid] = extract_mask(ImportanceTable(avg, "taylor"), p, scope, group=gid,
                                      strategy="te")
        else:
            if rng is None:
                raise ValueError("random grouping requires rng")
            masks[gid] = random_mask(params, p, scope, rng, group=gid)
    return masks


def masks_by_language(masks: dict[str, SubnetMask],
                      grouping: Sequence[Sequence[str]]) -> dict[str, SubnetMask]:
    """Resolve each language to its group's mask."""
    out: dict[str, SubnetMask] = {}
    for group in grouping:
        mask = masks[group_id(group)]
        for lang in group:
            out[lang] = mask
    return out


def apply_mask(params: modelmod.ParamTree, mask: SubnetMask) -> modelmod.MaskedParamTree:
    """View of the tree whose forward equals a copy with pruned weights set
    to literal zero; gradients at pruned positions are exactly zero."""
    for name, bits in mask.entries.items():
        if name not in params or bits.shape != params.shape(name):
            raise ValueError(f"mask misaligned with parameter tree at '{name}'")
    return modelmod.MaskedParamTree(params, dict(mask.entries))


def materialize_masked(params: modelmod.ParamTree, mask: SubnetMask) -> modelmod.ParamTree:
    """Copy of the tree with pruned weights literally zeroed (oracle for the
    view-based path)."""
    out = params.copy()
    for name, bits in mask.entries.items():
        out.set_array(name, np.where(bits, out.array(name), np.float32(0.0)))
    return out


# ---------------------------------------------------------------------------
# mask file format: magic | u64 header length | JSON header | packed bits
#
# The JSON header records names, shapes, strategy, scope, prune rate, group,
# and per-entry byte offsets into the packed-bitset blob (np.packbits order,
# each entry padded to a byte boundary). One file per mask.


def save_mask(mask: SubnetMask, path) -> Path:
    path = Path(path)
    names = sorted(mask.entries)
    blobs = []
    offset = 0
    entries_meta = []
    for name in names:
        bits = np.packbits(mask.entries[name].reshape(-1)).tobytes()
        entries_meta.append({
            "name": name,
            "shape": list(mask.entries[name].shape),
            "offset": offset,
            "n_bytes": len(bits),
        })
        blobs.append(bits)
        offset += len(bits)
    header = json.dumps({
        "format_version": 1,
        "group": mask.group,
        "prune_rate": mask.prune_rate,
        "scope": mask.scope,
        "strategy": mask.strategy,
        "entries": entries_meta,
    }, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MASK_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    return path


def load_mask(path) -> SubnetMask:
    raw = Path(path).read_bytes()
    if raw[:8] != _MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    base = 16 + hlen
    entries: dict[str, np.ndarray] = {}
    for e in header["entries"]:
        shape = tuple(e["shape"])
        size = int(np.prod(shape))
        packed = np.frombuffer(raw, dtype=np.uint8,
                               count=e["n_bytes"], offset=base + e["offset"])
        bits = np.unpackbits(packed, count=size).astype(bool).reshape(shape)
        entries[e["name"]] = bits
    return SubnetMask(entries=entries, group=header["group"],
                      prune_rate=header["prune_rate"], scope=header["scope"],
                      strategy=header["strategy"])
