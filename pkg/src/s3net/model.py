"""Miniature multilingual speech encoder.

Three components: a strided convolutional feature extractor mapping raw
waveform to latent frames, a transformer context network (pre-norm blocks
with a convolutional positional layer), and a product quantizer that picks
one codeword per codebook via hard Gumbel-softmax to form training targets.

Parameters live in a :class:`ParamTree`; every entry carries a section tag,
and the ``context_linear`` section (attention projections and feed-forward
weight matrices, biases excluded) is the prunable set used by sub-network
extraction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod

SECTION_FEATURE_ENCODER = "feature_encoder"
SECTION_CONTEXT_LINEAR = "context_linear"
SECTION_CONTEXT_OTHER = "context_other"
SECTION_QUANTIZER = "quantizer"
SECTION_MASK_EMBEDDING = "mask_embedding"

SECTIONS = (
    SECTION_FEATURE_ENCODER,
    SECTION_CONTEXT_LINEAR,
    SECTION_CONTEXT_OTHER,
    SECTION_QUANTIZER,
    SECTION_MASK_EMBEDDING,
)

# Documented full-scale reference quantizer (2 codebooks x 320 entries each,
# i.e. 320**2 > 100k addressable codewords). The desk default below keeps the
# same structure at 2 x 40.
FULL_SCALE_CODEBOOKS = {"codebooks_g": 2, "entries_v": 320}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    encoder_layers: tuple[tuple[int, int, int], ...] = ((24, 10, 8), (48, 8, 5), (64, 4, 4))
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    ffn_dim: int = 256
    codebooks_g: int = 2
    entries_v: int = 40
    codeword_dim: int = 12
    pos_kernel: int = 9
    sample_rate: int = 8000

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_heads", "n_blocks", "ffn_dim", "codebooks_g",
                     "entries_v", "codeword_dim", "sample_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.encoder_layers:
            raise ValueError("encoder_layers must be nonempty")
        for ch, k, s in self.encoder_layers:
            if ch <= 0 or k <= 0 or s <= 0:
                raise ValueError(f"invalid encoder layer spec ({ch}, {k}, {s})")
        if self.pos_kernel % 2 != 1:
            raise ValueError("pos_kernel must be odd so the positional conv preserves length")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def frame_stride_samples(self) -> int:
        out = 1
        for _, _, s in self.encoder_layers:
            out *= s
        return out

    @property
    def receptive_field_samples(self) -> int:
        rf, jump = 1, 1
        for _, k, s in self.encoder_layers:
            rf += (k - 1) * jump
            jump *= s
        return rf

    @property
    def frame_stride_ms(self) -> float:
        return 1000.0 * self.frame_stride_samples / self.sample_rate

    @property
    def frame_width_ms(self) -> float:
        return 1000.0 * self.receptive_field_samples / self.sample_rate


def num_frames(cfg: ModelConfig, n_samples: int) -> int:
    """Frame count produced by the encoder stride arithmetic:
    T = floor((L_i - k_i) / s_i) + 1 applied per conv layer."""
    t = n_samples
    for _, k, s in cfg.encoder_layers:
        if t < k:
            return 0
        t = (t - k) // s + 1
    return t


def min_input_length(cfg: ModelConfig) -> int:
    """Shortest waveform that yields at least one frame (one receptive field)."""
    return cfg.receptive_field_samples


class ParamTree:
    """Named, shaped collection of trainable tensors with section tags."""

    def __init__(self):
        self._tensors: dict[str, ad.Tensor] = {}
        self._sections: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, section: str) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name '{name}'")
        if section not in SECTIONS:
            raise ValueError(f"unknown section '{section}' for '{name}'")
        self._tensors[name] = ad.Tensor(data, requires_grad=True, name=name)
        self._sections[name] = section

    def names(self) -> list[str]:
        return list(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def tensor(self, name: str) -> ad.Tensor:
        return self._tensors[name]

    def array(self, name: str) -> np.ndarray:
        return self._tensors[name].data

    def section(self, name: str) -> str:
        return self._sections[name]

    def shape(self, name: str) -> tuple[int, ...]:
        return self._tensors[name].shape

    def prunable_names(self) -> list[str]:
        return [n for n in self._tensors if self._sections[n] == SECTION_CONTEXT_LINEAR]

    def set_array(self, name: str, data: np.ndarray) -> None:
        t = self._tensors[name]
        if data.shape != t.shape:
            raise ValueError(f"shape mismatch for '{name}': {data.shape} != {t.shape}")
        t.data = np.ascontiguousarray(data, dtype=t.dtype)

    def copy(self) -> "ParamTree":
        other = ParamTree()
        for name, t in self._tensors.items():
            other.add(name, t.data.copy(), self._sections[name])
        return other

    def astype(self, dtype) -> "ParamTree":
        other = ParamTree()
        for name, t in self._tensors.items():
            other._tensors[name] = ad.Tensor(t.data.astype(dtype), requires_grad=True, name=name)
            other._sections[name] = self._sections[name]
        return other

    def counts_by_section(self) -> dict[str, int]:
        counts = {s: 0 for s in SECTIONS}
        for name, t in self._tensors.items():
            counts[self._sections[name]] += t.size
        return counts

    def total_size(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def digest(self) -> str:
        """Content hash over (name, shape, bytes) in name order; detects any mutation."""
        h = hashlib.sha256()
        for name in sorted(self._tensors):
            t = self._tensors[name]
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def items(self):
        return self._tensors.items()

    def grad_map(self, grads: dict) -> dict[str, np.ndarray]:
        """Rekey a backward() result {tensor: grad} by parameter name."""
        return {name: grads[t] for name, t in self._tensors.items() if t in grads}


class MaskedParamTree:
    """Read view of a ParamTree with per-entry keep-masks applied on access.

    Forward passes through this view are bit-identical to a materialized
    copy whose dropped weights are literal zeros, while gradients still
    reach the underlying shared tensors (masked positions receive exact
    zero gradient).
    """

    def __init__(self, base: ParamTree, mask_entries: dict[str, np.ndarray]):
        for name, bits in mask_entries.items():
            if name not in base:
                raise ValueError(f"mask entry '{name}' not in parameter tree")
            if bits.shape != base.shape(name):
                raise ValueError(f"mask shape {bits.shape} misaligned with '{name}' {base.shape(name)}")
        self.base = base
        self.mask_entries = mask_entries

    def names(self) -> list[str]:
        return self.base.names()

    def __contains__(self, name: str) -> bool:
        return name in self.base

    def section(self, name: str) -> str:
        return self.base.section(name)

    def tensor(self, name: str) -> ad.Tensor:
        t = self.base.tensor(name)
        bits = self.mask_entries.get(name)
        return t if bits is None else ad.mask_weights(t, bits)


def init_params(cfg: ModelConfig, seed: int) -> ParamTree:
    """Initialize all model parameters deterministically from a seed."""
    gen = rngmod.stream(seed, "init")
    params = ParamTree()

    def xavier(fan_in, fan_out, shape):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return gen.uniform(-lim, lim, size=shape).astype(np.float32)

    c_in = 1
    for i, (ch, k, _s) in enumerate(cfg.encoder_layers):
        params.add(f"encoder.conv{i}.w", xavier(c_in * k, ch, (ch, c_in, k)), SECTION_FEATURE_ENCODER)
        params.add(f"encoder.conv{i}.b", np.zeros(ch, dtype=np.float32), SECTION_FEATURE_ENCODER)
        params.add(f"encoder.conv{i}.ln.gamma", np.ones(ch, dtype=np.float32), SECTION_FEATURE_ENCODER)
        params.add(f"encoder.conv{i}.ln.beta", np.zeros(ch, dtype=np.float32), SECTION_FEATURE_ENCODER)
        c_in = ch

    d = cfg.d_model
    params.add("context.in_ln.gamma", np.ones(c_in, dtype=np.float32), SECTION_CONTEXT_OTHER)
    params.add("context.in_ln.beta", np.zeros(c_in, dtype=np.float32), SECTION_CONTEXT_OTHER)
    params.add("context.in_proj.w", xavier(c_in, d, (c_in, d)), SECTION_CONTEXT_OTHER)
    params.add("context.in_proj.b", np.zeros(d, dtype=np.float32), SECTION_CONTEXT_OTHER)

    params.add("context.pos_conv.w", xavier(d * cfg.pos_kernel, d, (d, d, cfg.pos_kernel)),
               SECTION_CONTEXT_OTHER)
    params.add("context.pos_conv.b", np.zeros(d, dtype=np.float32), SECTION_CONTEXT_OTHER)

    for i in range(cfg.n_blocks):
        pre = f"context.block{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            params.add(f"{pre}.attn.{proj}", xavier(d, d, (d, d)), SECTION_CONTEXT_LINEAR)
        for bias in ("bq", "bk", "bv", "bo"):
            params.add(f"{pre}.attn.{bias}", np.zeros(d, dtype=np.float32), SECTION_CONTEXT_OTHER)
        params.add(f"{pre}.ln1.gamma", np.ones(d, dtype=np.float32), SECTION_CONTEXT_OTHER)
        params.add(f"{pre}.ln1.beta", np.zeros(d, dtype=np.float32), SECTION_CONTEXT_OTHER)
        params.add(f"{pre}.ffn.w1", xavier(d, cfg.ffn_dim, (d, cfg.ffn_dim)), SECTION_CONTEXT_LINEAR)
        params.add(f"{pre}.ffn.b1", np.zeros(cfg.ffn_dim, dtype=np.float32), SECTION_CONTEXT_OTHER)
        params.add(f"{pre}.ffn.w2", xavier(cfg.ffn_dim, d, (cfg.ffn_dim, d)), SECTION_CONTEXT_LINEAR)
        params.add(f"{pre}.ffn.b2", np.zeros(d, dtype=np.float32), SECTION_CONTEXT_OTHER)
        params.add(f"{pre}.ln2.gamma", np.ones(d, dtype=np.float32), SECTION_CONTEXT_OTHER)
        params.add(f"{pre}.ln2.beta", np.zeros(d, dtype=np.float32), SECTION_CONTEXT_OTHER)

    params.add("context.final_ln.gamma", np.ones(d, dtype=np.float32), SECTION_CONTEXT_OTHER)
    params.add("context.final_ln.beta", np.zeros(d, dtype=np.float32), SECTION_CONTEXT_OTHER)

    g, v, cd = cfg.codebooks_g, cfg.entries_v, cfg.codeword_dim
    params.add("quantizer.logits.w", xavier(d, g * v, (d, g * v)), SECTION_QUANTIZER)
    params.add("quantizer.logits.b", np.zeros(g * v, dtype=np.float32), SECTION_QUANTIZER)
    params.add("quantizer.codebook",
               (gen.normal(size=(g, v, cd)) / np.sqrt(cd)).astype(np.float32), SECTION_QUANTIZER)
    params.add("quantizer.out.w", xavier(g * cd, d, (g * cd, d)), SECTION_QUANTIZER)
    params.add("quantizer.out.b", np.zeros(d, dtype=np.float32), SECTION_QUANTIZER)

    params.add("mask_embedding",
               (0.1 * gen.normal(size=d)).astype(np.float32), SECTION_MASK_EMBEDDING)
    return params


def _as_batched_wave(waveform) -> tuple[ad.Tensor, bool]:
    t = waveform if isinstance(waveform, ad.Tensor) else ad.constant(np.asarray(waveform))
    if t.ndim == 1:
        return ad.reshape(t, (1, t.shape[0])), True
    if t.ndim == 2:
        return t, False
    raise ad.ShapeError(f"waveform must be (L,) or (B, L), got {t.shape}")


def feature_encode(waveform, params, cfg: ModelConfig) -> ad.Tensor:
    """Map raw waveform to latent frames of shape (T, d_model), or (B, T, d_model)
    for a batch. Raises for inputs shorter than one receptive field."""
    x, single = _as_batched_wave(waveform)
    n = x.shape[1]
    if n < min_input_length(cfg):
        raise ValueError(
            f"waveform length {n} below minimum {min_input_length(cfg)} (one receptive field)")
    h = ad.reshape(x, (x.shape[0], 1, n))
    for i, (_ch, _k, s) in enumerate(cfg.encoder_layers):
        h = ad.conv1d(h, params.tensor(f"encoder.conv{i}.w"), params.tensor(f"encoder.conv{i}.b"),
                      stride=s)
        h = ad.transpose(h, (0, 2, 1))
        h = ad.layer_norm(h, params.tensor(f"encoder.conv{i}.ln.gamma"),
                          params.tensor(f"encoder.conv{i}.ln.beta"))
        h = ad.gelu(h)
        h = ad.transpose(h, (0, 2, 1))
    h = ad.transpose(h, (0, 2, 1))  # (B, T, C)
    h = ad.layer_norm(h, params.tensor("context.in_ln.gamma"), params.tensor("context.in_ln.beta"))
    z = ad.add(ad.matmul(h, params.tensor("context.in_proj.w")), params.tensor("context.in_proj.b"))
    return ad.reshape(z, z.shape[1:]) if single else z


def quantize(z, params, cfg: ModelConfig, temperature: float,
             rng: np.random.Generator, hard: bool = True, with_selections: bool = False):
    """Discretize latent frames into quantized targets.

    Each frame picks exactly one entry per codebook (hard Gumbel-softmax,
    gradients through the soft distribution); the selected codewords are
    concatenated and linearly projected back to d_model. Also returns the
    usage table: the noise-free softmax over entries averaged over all
    frames, one row per codebook (rows sum to 1). With ``with_selections``
    the chosen entry indices (..., G) are returned as a third value.
    """
    single = z.ndim == 2
    zb = ad.reshape(z, (1,) + z.shape) if single else z
    b, t, d = zb.shape
    g, v, cd = cfg.codebooks_g, cfg.entries_v, cfg.codeword_dim

    logits = ad.add(ad.matmul(zb, params.tensor("quantizer.logits.w")),
                    params.tensor("quantizer.logits.b"))
    logits = ad.reshape(logits, (b * t * g, v))

    usage = ad.reduce_mean(ad.reshape(ad.softmax(logits), (b * t, g, v)), axis=0)

    onehot = ad.gumbel_softmax(logits, temperature, hard, rng)
    sel = ad.transpose(ad.reshape(onehot, (b * t, g, v)), (1, 0, 2))      # (g, bt, v)
    words = ad.matmul(sel, params.tensor("quantizer.codebook"))           # (g, bt, cd)
    words = ad.reshape(ad.transpose(words, (1, 0, 2)), (b, t, g * cd))
    q = ad.add(ad.matmul(words, params.tensor("quantizer.out.w")), params.tensor("quantizer.out.b"))
    q = ad.reshape(q, (t, d)) if single else q
    if not with_selections:
        return q, usage
    indices = onehot.data.argmax(axis=-1).reshape(b, t, g)
    return q, usage, (indices[0] if single else indices)


def _bool_time_mask(time_mask, shape: tuple[int, int]) -> np.ndarray:
    b, t = shape
    arr = np.asarray(time_mask)
    if arr.dtype == bool:
        if arr.shape != (b, t):
            raise ad.ShapeError(f"boolean time mask shape {arr.shape} != {(b, t)}")
        return arr
    mask = np.zeros((b, t), dtype=bool)
    idx = arr.astype(np.intp).reshape(-1)
    if idx.size:
        if idx.min() < 0 or idx.max() >= t:
            raise IndexError(f"time mask index out of range for T={t}")
        mask[:, idx] = True
    return mask


def contextualize(z, time_mask, params, cfg: ModelConfig) -> ad.Tensor:
    """Run the context network over latent frames.

    Frames whose index is in ``time_mask`` are replaced by the learned mask
    embedding before the transformer; attention is over the full sequence.
    ``time_mask`` is an index set for a single (T, d) input or a boolean
    (B, T) matrix for a batch.
    """
    single = z.ndim == 2
    zb = ad.reshape(z, (1,) + z.shape) if single else z
    b, t, d = zb.shape
    mask = _bool_time_mask(time_mask, (b, t))

    x = ad.replace_rows(zb, mask, params.tensor("mask_embedding"))

    xt = ad.transpose(x, (0, 2, 1))
    pos = ad.conv1d(xt, params.tensor("context.pos_conv.w"), params.tensor("context.pos_conv.b"),
                    stride=1, padding=cfg.pos_kernel // 2)
    x = ad.add(x, ad.transpose(ad.gelu(pos), (0, 2, 1)))

    h = cfg.n_heads
    hd = cfg.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)
    for i in range(cfg.n_blocks):
        pre = f"context.block{i}"
        xn = ad.layer_norm(x, params.tensor(f"{pre}.ln1.gamma"), params.tensor(f"{pre}.ln1.beta"))

        def heads(name, bias):
            y = ad.add(ad.matmul(xn, params.tensor(f"{pre}.attn.{name}")),
                       params.tensor(f"{pre}.attn.{bias}"))
            return ad.transpose(ad.reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        attn_out = ad.add(ad.matmul(ctx, params.tensor(f"{pre}.attn.wo")),
                          params.tensor(f"{pre}.attn.bo"))
        x = ad.add(x, attn_out)

        xn2 = ad.layer_norm(x, params.tensor(f"{pre}.ln2.gamma"), params.tensor(f"{pre}.ln2.beta"))
        ff = ad.gelu(ad.add(ad.matmul(xn2, params.tensor(f"{pre}.ffn.w1")),
                            params.tensor(f"{pre}.ffn.b1")))
        ff = ad.add(ad.matmul(ff, params.tensor(f"{pre}.ffn.w2")), params.tensor(f"{pre}.ffn.b2"))
        x = ad.add(x, ff)

    c = ad.layer_norm(x, params.tensor("context.final_ln.gamma"),
                      params.tensor("context.final_ln.beta"))
    return ad.reshape(c, (t, d)) if single else c
