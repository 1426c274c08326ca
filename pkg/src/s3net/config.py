"""Run configuration: one JSON document drives every pipeline stage.

Unknown keys are rejected with their full path; values are validated by the
component constructors they feed. The effective configuration (defaults
resolved) is echoed into every run directory, and its content hash --
computed over everything except filesystem paths -- identifies the run's
science settings.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from . import data as datamod
from .checkpoint import digest_config
from .model import ModelConfig
from .objective import MaskSpec, ObjectiveConfig, TemperatureSchedule
from .pruning import SCOPES, STRATEGIES
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""


DEFAULTS: dict = {
    "seed": 1234,
    "corpus": {
        "path": "corpus",
        "sample_rate": 8000,
        "window_seconds": 0.6,
        "split_fracs": {"valid": 0.1, "test": 0.1},
        "languages": {
            "n_high": 8,
            "n_low": 2,
            "high_seconds": 180.0,
            "low_seconds": 60.0,
            "states_per_language": 4,
            "shared_state_fraction": 0.5,
            "noise_level": 0.05,
            "spec_seed": 0,
            "explicit": None,
        },
    },
    "model": {
        "encoder_layers": [[24, 10, 8], [48, 8, 5], [64, 4, 4]],
        "d_model": 64,
        "n_heads": 4,
        "n_blocks": 4,
        "ffn_dim": 256,
        "codebooks_g": 2,
        "entries_v": 40,
        "codeword_dim": 12,
        "pos_kernel": 9,
    },
    "objective": {
        "mask_start_prob": 0.065,
        "mask_span": 10,
        "distractors_k": 10,
        "kappa": 0.1,
        "diversity_weight": 0.1,
        "temperature": {"start": 2.0, "floor": 0.5, "decay": 0.9995},
    },
    "train": {
        "batch_size": 6,
        "peak_lr": 2.5e-3,
        "warmup_frac": 0.1,
        "beta1": 0.9,
        "beta2": 0.98,
        "eps": 1e-6,
        "grad_clip": 5.0,
        "pretrain_steps": 2000,
        "warmup_steps": 500,
        "adapt_steps": 500,
    },
    "pruning": {
        "strategy": "lth",
        "scope": "layerwise",
        "prune_rate": 0.4,
        "n_masks": None,
        "grouping": None,
        "te_batches": 8,
    },
    "eval": {
        "seed": 10007,
        "split": "valid",
    },
    "sweep": {
        "strategy": None,
        "scope": None,
        "prune_rate": None,
        "n_masks": None,
        "max_cells": 64,
    },
}


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"section '{path or '<root>'}' must be an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown key '{here}'")
        if isinstance(defaults[key], dict) and defaults[key]:
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    """Validated configuration with constructed component configs."""

    effective: dict
    seed: int
    model: ModelConfig
    objective: ObjectiveConfig

    @property
    def corpus_path(self) -> Path:
        return Path(self.effective["corpus"]["path"])

    @property
    def corpus_section(self) -> dict:
        return self.effective["corpus"]

    @property
    def pruning(self) -> dict:
        return self.effective["pruning"]

    @property
    def eval_seed(self) -> int:
        return int(self.effective["eval"]["seed"])

    @property
    def eval_split(self) -> str:
        return self.effective["eval"]["split"]

    def train_config(self, stage: str) -> TrainConfig:
        t = self.effective["train"]
        steps = {"pretrain": t["pretrain_steps"], "warmup": t["warmup_steps"],
                 "adapt": t["adapt_steps"]}[stage]
        return TrainConfig(steps=steps, batch_size=t["batch_size"], peak_lr=t["peak_lr"],
                           warmup_frac=t["warmup_frac"], beta1=t["beta1"], beta2=t["beta2"],
                           eps=t["eps"], grad_clip=t["grad_clip"])

    def science_digest(self) -> str:
        """Config hash excluding filesystem paths."""
        science = copy.deepcopy(self.effective)
        science["corpus"].pop("path", None)
        return digest_config(science)

    def language_specs(self) -> list[datamod.LanguageSpec]:
        langs = self.effective["corpus"]["languages"]
        if langs["explicit"] is not None:
            specs = []
            for i, entry in enumerate(langs["explicit"]):
                try:
                    specs.append(datamod._spec_from_dict(entry))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ConfigError(f"corpus.languages.explicit[{i}]: {exc}") from exc
            return specs
        return datamod.default_language_specs(
            n_high=int(langs["n_high"]), n_low=int(langs["n_low"]),
            seed=int(langs["spec_seed"]), sample_rate=int(self.effective["corpus"]["sample_rate"]),
            high_seconds=float(langs["high_seconds"]), low_seconds=float(langs["low_seconds"]),
            states_per_language=int(langs["states_per_language"]),
            shared_state_fraction=float(langs["shared_state_fraction"]),
            noise_level=float(langs["noise_level"]))

    def with_overrides(self, **pruning_overrides) -> "RunConfig":
        eff = copy.deepcopy(self.effective)
        if "grouping" in pruning_overrides and "n_masks" not in pruning_overrides:
            eff["pruning"]["n_masks"] = None  # an explicit grouping replaces the count
        for k, v in pruning_overrides.items():
            if v is None:
                continue
            if k == "seed":
                eff["seed"] = v
            elif k in eff["pruning"]:
                eff["pruning"][k] = v
            else:
                raise ConfigError(f"unknown override '{k}'")
        return parse_config(eff)


def parse_config(user: dict) -> RunConfig:
    eff = _merge(DEFAULTS, user)
    try:
        mc = eff["model"]
        model = ModelConfig(
            encoder_layers=tuple(tuple(int(x) for x in layer) for layer in mc["encoder_layers"]),
            d_model=int(mc["d_model"]), n_heads=int(mc["n_heads"]),
            n_blocks=int(mc["n_blocks"]), ffn_dim=int(mc["ffn_dim"]),
            codebooks_g=int(mc["codebooks_g"]), entries_v=int(mc["entries_v"]),
            codeword_dim=int(mc["codeword_dim"]), pos_kernel=int(mc["pos_kernel"]),
            sample_rate=int(eff["corpus"]["sample_rate"]),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    try:
        oc = eff["objective"]
        objective = ObjectiveConfig(
            mask=MaskSpec(start_prob=float(oc["mask_start_prob"]), span=int(oc["mask_span"])),
            distractors_k=int(oc["distractors_k"]), kappa=float(oc["kappa"]),
            diversity_weight=float(oc["diversity_weight"]),
            temperature=TemperatureSchedule(**{k: float(v)
                                               for k, v in oc["temperature"].items()}),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"objective: {exc}") from exc

    cfg = RunConfig(effective=eff, seed=int(eff["seed"]), model=model, objective=objective)
    try:
        for stage in ("pretrain", "warmup", "adapt"):
            cfg.train_config(stage)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc

    pr = eff["pruning"]
    if pr["strategy"] not in STRATEGIES:
        raise ConfigError(f"pruning.strategy: must be one of {STRATEGIES}, got '{pr['strategy']}'")
    if pr["scope"] not in SCOPES:
        raise ConfigError(f"pruning.scope: must be one of {SCOPES}, got '{pr['scope']}'")
    if not 0.0 <= float(pr["prune_rate"]) < 1.0:
        raise ConfigError(f"pruning.prune_rate: must be in [0, 1), got {pr['prune_rate']}")
    if pr["n_masks"] is not None and pr["grouping"] is not None:
        raise ConfigError("pruning: set n_masks or grouping, not both")
    if int(pr["te_batches"]) < 1:
        raise ConfigError("pruning.te_batches: must be >= 1")

    corpus = eff["corpus"]
    if float(corpus["window_seconds"]) <= 0:
        raise ConfigError("corpus.window_seconds: must be positive")
    langs = corpus["languages"]
    if int(langs["n_high"]) + int(langs["n_low"]) < 1:
        raise ConfigError("corpus.languages: need at least one language")
    for frac_key, frac in corpus["split_fracs"].items():
        if frac_key not in ("valid", "test"):
            raise ConfigError(f"corpus.split_fracs: unknown split '{frac_key}'")
        if not 0.0 <= float(frac) < 1.0:
            raise ConfigError(f"corpus.split_fracs.{frac_key}: must be in [0, 1)")
    if eff["sweep"]["max_cells"] is not None and int(eff["sweep"]["max_cells"]) < 1:
        raise ConfigError("sweep.max_cells: must be >= 1")
    try:
        cfg.language_specs()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"corpus.languages: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(user)


def resolve_grouping(cfg: RunConfig, languages: list[str],
                     tiers: dict[str, str]) -> list[list[str]]:
    """Turn the n_masks count or explicit grouping into a language partition.

    Supported counts: 1 (one shared mask), L (fully individual), and
    n_high + 1 (individual high-resource plus one joint low-resource group);
    anything else needs an explicit grouping.
    """
    pr = cfg.pruning
    if pr["grouping"] is not None:
        grouping = [[str(l) for l in g] for g in pr["grouping"]]
        return grouping
    n = pr["n_masks"]
    if n is None or int(n) == len(languages):
        return [[l] for l in languages]
    n = int(n)
    if n == 1:
        return [list(languages)]
    high = [l for l in languages if tiers[l] == "high"]
    low = [l for l in languages if tiers[l] == "low"]
    if low and n == len(high) + 1:
        return [[l] for l in high] + [low]
    raise ConfigError(
        f"pruning.n_masks={n} has no default grouping for {len(languages)} languages "
        f"({len(high)} high / {len(low)} low); supply pruning.grouping explicitly")
