"""Synthetic multilingual corpus: per-language Markov tone generators, an
on-disk shard/manifest layout, PCM ingestion, and the multinomial language
sampler used to form training batches.

Corpus layout (documented, byte-exact)::

    corpus_dir/
      manifest.json            # languages, amounts, splits, generators, seeds,
                               # per-shard sha256 digests
      <lang>/<split>.f32       # n_windows x window_samples float32,
                               # little-endian, row-major

Every batch is monolingual: a window matrix plus the language id it was
drawn from.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod

FORMAT_VERSION = 1
TIERS = ("high", "low")
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class StateSpec:
    """One spectral state: a bank of tone frequencies (Hz) and amplitudes."""

    freqs: tuple[float, ...]
    amps: tuple[float, ...]

    def __post_init__(self):
        if len(self.freqs) != len(self.amps) or not self.freqs:
            raise ValueError("freqs and amps must be nonempty and equal-length")


@dataclass(frozen=True)
class GeneratorSpec:
    """Markov chain over spectral states emitting bandlimited tone segments."""

    states: tuple[StateSpec, ...]
    transitions: tuple[tuple[float, ...], ...]
    segment_ms: float = 100.0
    noise_level: float = 0.05

    def __post_init__(self):
        n = len(self.states)
        if n == 0:
            raise ValueError("generator needs at least one state")
        if len(self.transitions) != n or any(len(row) != n for row in self.transitions):
            raise ValueError(f"transitions must be {n}x{n}")
        for i, row in enumerate(self.transitions):
            if any(p < 0 for p in row):
                raise ValueError(f"transitions[{i}] has negative entries")
            if abs(sum(row) - 1.0) > 1e-6:
                raise ValueError(f"transitions[{i}] sums to {sum(row)}, expected 1")
        if self.segment_ms <= 0:
            raise ValueError("segment_ms must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")

    def validate_against_rate(self, sample_rate: int) -> None:
        nyquist = sample_rate / 2
        for i, st in enumerate(self.states):
            if any(f <= 0 or f >= nyquist for f in st.freqs):
                raise ValueError(f"state {i} has frequencies outside (0, {nyquist}) Hz")


@dataclass(frozen=True)
class LanguageSpec:
    """A synthetic language: amount of audio (seconds at desk scale), its
    resource tier, and the spectral generator that produces it."""

    id: str
    seconds: float
    tier: str
    generator: GeneratorSpec

    def __post_init__(self):
        if not self.id:
            raise ValueError("language id must be nonempty")
        if self.seconds <= 0:
            raise ValueError(f"language '{self.id}': seconds must be positive")
        if self.tier not in TIERS:
            raise ValueError(f"language '{self.id}': tier must be one of {TIERS}")


@dataclass
class BatchPlan:
    """A monolingual batch: equal-length windows from a single language."""

    language: str
    windows: np.ndarray  # (B, window_samples) float32
    seed_lineage: str


def language_sampler(specs, alpha: float, rng: np.random.Generator) -> str:
    """Draw one language id with probability (n_l / N) ** alpha, normalized."""
    probs = sampling_probabilities(specs, alpha)
    ids = [s.id for s in specs]
    return ids[rng.choice(len(ids), p=probs)]


def sampling_probabilities(specs, alpha: float) -> np.ndarray:
    if not specs:
        raise ValueError("no languages to sample from")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    amounts = np.array([s.seconds for s in specs], dtype=np.float64)
    total = amounts.sum()
    if total <= 0:
        raise ValueError("total amount must be positive")
    w = (amounts / total) ** alpha
    return w / w.sum()


def tiered_language_sampler(specs, rng: np.random.Generator,
                            alpha_high: float = 1.0, alpha_low: float = 0.5) -> str:
    """Two-stage draw: pick a tier proportional to its total amount, then a
    language within the tier with that tier's tempering exponent (natural
    sampling for high-resource, upsampled low-resource)."""
    by_tier = {t: [s for s in specs if s.tier == t] for t in TIERS}
    by_tier = {t: v for t, v in by_tier.items() if v}
    if not by_tier:
        raise ValueError("no languages to sample from")
    tiers = sorted(by_tier)
    tier_mass = np.array([sum(s.seconds for s in by_tier[t]) for t in tiers], dtype=np.float64)
    tier = tiers[rng.choice(len(tiers), p=tier_mass / tier_mass.sum())]
    alpha = alpha_high if tier == "high" else alpha_low
    return language_sampler(by_tier[tier], alpha, rng)


def synth_utterance(spec: LanguageSpec, duration_s: float, sample_rate: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Emit one synthetic utterance: a Markov chain over the language's
    spectral states, each segment a sum of its tones (random phases) plus
    white noise. Deterministic given the generator state."""
    gen = spec.generator
    gen.validate_against_rate(sample_rate)
    n_samples = int(round(duration_s * sample_rate))
    seg_len = max(1, int(round(gen.segment_ms * sample_rate / 1000.0)))
    n_states = len(gen.states)
    trans = np.asarray(gen.transitions, dtype=np.float64)

    out = np.empty(n_samples, dtype=np.float32)
    state = int(rng.integers(n_states))
    pos = 0
    while pos < n_samples:
        ln = min(seg_len, n_samples - pos)
        t = (np.arange(ln) + pos) / sample_rate
        st = gen.states[state]
        seg = np.zeros(ln)
        for f, a in zip(st.freqs, st.amps):
            seg += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        if gen.noise_level > 0:
            seg += gen.noise_level * rng.standard_normal(ln)
        out[pos:pos + ln] = seg.astype(np.float32)
        pos += ln
        state = int(rng.choice(n_states, p=trans[state]))
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= np.float32(0.5) / np.float32(peak)
    return out


def default_language_specs(n_high: int = 8, n_low: int = 2, seed: int = 0,
                           sample_rate: int = 8000, high_seconds: float = 180.0,
                           low_seconds: float = 60.0, states_per_language: int = 4,
                           shared_state_fraction: float = 0.5,
                           noise_level: float = 0.05) -> list[LanguageSpec]:
    """Build a synthetic language family over a shared pool of spectral
    states so cross-language transfer structure exists: each language mixes
    pool states (shared) with private states (language-specific)."""
    if n_high < 0 or n_low < 0 or n_high + n_low == 0:
        raise ValueError("need at least one language")
    gen = rngmod.stream(seed, "language-specs")
    n_langs = n_high + n_low
    n_shared = max(1, int(round(states_per_language * shared_state_fraction)))
    n_private = states_per_language - n_shared

    def make_state(lo: float, hi: float) -> StateSpec:
        n_tones = int(gen.integers(2, 4))
        freqs = tuple(float(f) for f in np.sort(gen.uniform(lo, hi, size=n_tones)))
        amps = tuple(float(a) for a in gen.uniform(0.4, 1.0, size=n_tones))
        return StateSpec(freqs, amps)

    nyquist = sample_rate / 2
    pool = [make_state(80.0, nyquist * 0.9) for _ in range(max(2, n_langs))]

    specs = []
    for i in range(n_langs):
        tier = "high" if i < n_high else "low"
        shared = [pool[int(j)] for j in gen.choice(len(pool), size=n_shared, replace=False)]
        # private states in a language-specific band to keep languages distinct
        lo = 100.0 + (i / n_langs) * nyquist * 0.5
        private = [make_state(lo, lo + nyquist * 0.35) for _ in range(n_private)]
        states = tuple(shared + private)
        n = len(states)
        # sticky transitions with uniform leakage
        trans = np.full((n, n), 0.4 / max(1, n - 1))
        np.fill_diagonal(trans, 0.6 if n > 1 else 1.0)
        trans /= trans.sum(axis=1, keepdims=True)
        specs.append(LanguageSpec(
            id=f"syn{i:02d}",
            seconds=high_seconds if tier == "high" else low_seconds,
            tier=tier,
            generator=GeneratorSpec(
                states=states,
                transitions=tuple(tuple(float(p) for p in row) for row in trans),
                noise_level=noise_level,
            ),
        ))
    return specs


def mean_log_spectrum(signal: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Average log-magnitude spectrum over fixed chunks (spectral signature)."""
    sig = np.asarray(signal, dtype=np.float64)
    n = (len(sig) // chunk) * chunk
    if n == 0:
        raise ValueError(f"signal shorter than one chunk ({chunk})")
    frames = sig[:n].reshape(-1, chunk)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    return np.log1p(mag).mean(axis=0)


def spectral_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between mean log spectra of two signals."""
    return float(np.linalg.norm(mean_log_spectrum(a) - mean_log_spectrum(b)))


# ---------------------------------------------------------------------------
# on-disk corpus


def _spec_to_dict(spec: LanguageSpec) -> dict:
    return {
        "id": spec.id,
        "seconds": spec.seconds,
        "tier": spec.tier,
        "generator": {
            "states": [{"freqs": list(s.freqs), "amps": list(s.amps)} for s in spec.generator.states],
            "transitions": [list(r) for r in spec.generator.transitions],
            "segment_ms": spec.generator.segment_ms,
            "noise_level": spec.generator.noise_level,
        },
    }


def _spec_from_dict(d: dict) -> LanguageSpec:
    gen = d["generator"]
    return LanguageSpec(
        id=d["id"], seconds=d["seconds"], tier=d["tier"],
        generator=GeneratorSpec(
            states=tuple(StateSpec(tuple(s["freqs"]), tuple(s["amps"])) for s in gen["states"]),
            transitions=tuple(tuple(r) for r in gen["transitions"]),
            segment_ms=gen["segment_ms"],
            noise_level=gen["noise_level"],
        ),
    )


def _split_counts(n_windows: int, split_fracs: dict[str, float]) -> dict[str, int]:
    if n_windows < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} windows per language, got {n_windows}")
    counts = {}
    remaining = n_windows
    for split in SPLITS[1:]:
        c = max(1, int(round(n_windows * split_fracs.get(split, 0.1))))
        counts[split] = c
        remaining -= c
    if remaining < 1:
        raise ValueError("split fractions leave no training windows")
    counts["train"] = remaining
    return counts


def make_corpus(specs, out_dir, window_seconds: float = 0.6, sample_rate: int = 8000,
                seed: int = 0, split_fracs: dict[str, float] | None = None) -> "Corpus":
    """Generate shards and manifest for the given language specs.

    Per language, ``seconds`` is rounded down to whole windows, synthesized
    chunk by chunk with a per-(language, window) derived stream, and split
    into train/valid/test. Recorded amounts equal stored durations exactly.
    """
    out_dir = Path(out_dir)
    split_fracs = split_fracs or {"valid": 0.1, "test": 0.1}
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate language ids")
    window_samples = int(round(window_seconds * sample_rate))
    for spec in specs:
        spec.generator.validate_against_rate(sample_rate)

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "sample_rate": sample_rate,
        "window_seconds": window_seconds,
        "window_samples": window_samples,
        "seed": seed,
        "split_fracs": split_fracs,
        "languages": [],
    }
    for spec in specs:
        n_windows = int(spec.seconds / window_seconds)
        counts = _split_counts(n_windows, split_fracs)
        windows = np.stack([
            synth_utterance(spec, window_seconds, sample_rate,
                            rngmod.stream(seed, "corpus", spec.id, w))
            for w in range(n_windows)
        ])
        lang_dir = out_dir / spec.id
        lang_dir.mkdir(exist_ok=True)
        offset = 0
        shards = {}
        for split in SPLITS:
            part = windows[offset:offset + counts[split]]
            offset += counts[split]
            path = lang_dir / f"{split}.f32"
            blob = part.astype("<f4").tobytes()
            path.write_bytes(blob)
            shards[split] = {
                "windows": int(part.shape[0]),
                "seconds": part.shape[0] * window_seconds,
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        entry = _spec_to_dict(spec)
        entry["seconds"] = n_windows * window_seconds  # actual stored amount
        entry["splits"] = shards
        manifest["languages"].append(entry)

    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Corpus(out_dir)


def ingest_pcm_corpus(lang_files: dict[str, list], out_dir, window_seconds: float = 0.6,
                      sample_rate: int = 8000, tier_by_lang: dict[str, str] | None = None,
                      split_fracs: dict[str, float] | None = None) -> "Corpus":
    """Build the same corpus layout from uncompressed 16-bit mono PCM files.

    Samples are normalized to [-1, 1) and chopped into fixed windows;
    resampling is not performed (callers supply audio at ``sample_rate``).
    """
    out_dir = Path(out_dir)
    split_fracs = split_fracs or {"valid": 0.1, "test": 0.1}
    tier_by_lang = tier_by_lang or {}
    window_samples = int(round(window_seconds * sample_rate))
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "sample_rate": sample_rate,
        "window_seconds": window_seconds,
        "window_samples": window_samples,
        "seed": None,
        "split_fracs": split_fracs,
        "source": "pcm",
        "languages": [],
    }
    for lang, files in sorted(lang_files.items()):
        pieces = []
        for f in files:
            raw = Path(f).read_bytes()
            pieces.append(np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0)
        samples = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.float32)
        n_windows = len(samples) // window_samples
        counts = _split_counts(n_windows, split_fracs)
        windows = samples[:n_windows * window_samples].reshape(n_windows, window_samples)
        lang_dir = out_dir / lang
        lang_dir.mkdir(exist_ok=True)
        offset = 0
        shards = {}
        for split in SPLITS:
            part = windows[offset:offset + counts[split]]
            offset += counts[split]
            blob = part.astype("<f4").tobytes()
            (lang_dir / f"{split}.f32").write_bytes(blob)
            shards[split] = {
                "windows": int(part.shape[0]),
                "seconds": part.shape[0] * window_seconds,
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        manifest["languages"].append({
            "id": lang,
            "seconds": n_windows * window_seconds,
            "tier": tier_by_lang.get(lang, "high"),
            "generator": None,
            "splits": shards,
        })
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Corpus(out_dir)


class Corpus:
    """Reader over the on-disk corpus layout."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        self.sample_rate = int(self.manifest["sample_rate"])
        self.window_samples = int(self.manifest["window_samples"])
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    @property
    def languages(self) -> list[str]:
        return [e["id"] for e in self.manifest["languages"]]

    def entry(self, language: str) -> dict:
        for e in self.manifest["languages"]:
            if e["id"] == language:
                return e
        raise KeyError(f"unknown language '{language}'")

    def tier(self, language: str) -> str:
        return self.entry(language)["tier"]

    def seconds(self, language: str, split: str = "train") -> float:
        return float(self.entry(language)["splits"][split]["seconds"])

    def sampler_specs(self, split: str | None = None) -> list[LanguageSpec]:
        """Lightweight specs (id/seconds/tier) for the language sampler.

        By default ``seconds`` is the language's recorded total amount (the
        sampler's n_l); pass a split name to weight by that split instead.
        """
        dummy = GeneratorSpec(states=(StateSpec((440.0,), (1.0,)),), transitions=((1.0,),))
        return [LanguageSpec(
            id=e["id"],
            seconds=float(e["seconds"] if split is None else e["splits"][split]["seconds"]),
            tier=e["tier"], generator=dummy)
            for e in self.manifest["languages"]]

    def windows(self, language: str, split: str) -> np.ndarray:
        key = (language, split)
        if key not in self._cache:
            entry = self.entry(language)
            n = entry["splits"][split]["windows"]
            raw = (self.root / language / f"{split}.f32").read_bytes()
            arr = np.frombuffer(raw, dtype="<f4").reshape(n, self.window_samples)
            self._cache[key] = arr
        return self._cache[key]

    def sample_batch(self, language: str, split: str, batch_size: int,
                     rng: np.random.Generator, seed_lineage: str = "") -> BatchPlan:
        pool = self.windows(language, split)
        idx = rng.integers(0, pool.shape[0], size=batch_size)
        return BatchPlan(language=language, windows=pool[idx].copy(), seed_lineage=seed_lineage)

    def digest(self) -> str:
        """Corpus identity: hash over the manifest's shard digests."""
        h = hashlib.sha256()
        for e in self.manifest["languages"]:
            h.update(e["id"].encode())
            for split in SPLITS:
                h.update(e["splits"][split]["sha256"].encode())
        return h.hexdigest()
