"""Minimal decoder-only forward pass with a KV cache.

Two precisions share one code path: ``float`` keeps every matrix as a
float64 array and uses float RoPE tables; ``q4`` stores the embedding and all
linear weights as :class:`~slmsearch.quantkit.Q4BlockTensor` and uses the
INT8 RoPE tables. Norm weights stay full precision in both.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from slmsearch.archspace import ArchConfig
from slmsearch.quantkit import (
    Q4BlockTensor,
    RopeTableQ8,
    RopeTables,
    ShapeError,
    apply_rope,
    build_rope_tables,
    dequantize_q4_rows,
    q4_matmul,
    quantize_q4,
    quantize_rope,
)

RMS_EPS = 1e-5
PRECISIONS = ("float", "q4")
THREADS_ENV = "SLMSEARCH_THREADS"


class ContextOverflowError(ValueError):
    """More tokens than the model's context length."""


class TokenError(ValueError):
    """Token id outside the vocabulary, or an empty token list."""


class CacheError(ValueError):
    """KV cache length does not match the requested position."""


def default_threads() -> int:
    return int(os.environ.get(THREADS_ENV, "4"))


def set_threads(n: int) -> int:
    """Size the kernel worker pool; returns the count actually in effect.

    numba cannot exceed the pool it was started with (NUMBA_NUM_THREADS), so
    larger requests are clamped.
    """
    if n < 1:
        raise ValueError("thread count must be >= 1")
    effective = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(effective)
    return effective


@dataclass(frozen=True, eq=False)
class LayerWeights:
    attn_q: np.ndarray | Q4BlockTensor
    attn_k: np.ndarray | Q4BlockTensor
    attn_v: np.ndarray | Q4BlockTensor
    attn_o: np.ndarray | Q4BlockTensor
    ffn_gate: np.ndarray | Q4BlockTensor
    ffn_up: np.ndarray | Q4BlockTensor
    ffn_down: np.ndarray | Q4BlockTensor
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    MATRICES = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_gate", "ffn_up", "ffn_down")
    NORMS = ("attn_norm", "ffn_norm")


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Weights of a tied-embedding decoder. The output head is ``embedding.T``."""

    config: ArchConfig
    precision: str
    embedding: np.ndarray | Q4BlockTensor
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray

    def named_tensors(self):
        """Yield (name, tensor) in a fixed order; used by the weights file writer."""
        yield "embedding", self.embedding
        for i, layer in enumerate(self.layers):
            for name in LayerWeights.MATRICES + LayerWeights.NORMS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "final_norm", self.final_norm

    @property
    def rope(self) -> RopeTables | RopeTableQ8:
        return rope_for(self.config.context_len, self.config.head_dim,
                        self.config.rope_theta, self.precision == "q4")


def expected_shapes(config: ArchConfig) -> dict[str, tuple[int, ...]]:
    h, i, kv = config.hidden_size, config.intermediate_size, config.kv_dim
    per_layer = {
        "attn_q": (h, h), "attn_k": (kv, h), "attn_v": (kv, h), "attn_o": (h, h),
        "ffn_gate": (i, h), "ffn_up": (i, h), "ffn_down": (h, i),
        "attn_norm": (h,), "ffn_norm": (h,),
    }
    shapes = {"embedding": (config.vocab_size, h)}
    for layer in range(config.num_layers):
        shapes.update({f"layers.{layer}.{k}": v for k, v in per_layer.items()})
    shapes["final_norm"] = (h,)
    return shapes


@lru_cache(maxsize=8)
def rope_for(context_len: int, head_dim: int, theta: float, int8: bool):
    tables = build_rope_tables(context_len, head_dim, theta)
    return quantize_rope(tables) if int8 else tables


def iter_random_matrices(config: ArchConfig, seed: int = 0):
    """Yield (name, float32 matrix) in file order, drawn N(0, 1/hidden).

    This is the single source of random weights, so streaming audits see
    exactly the matrices :func:`init_random_weights` would build.
    """
    rng = np.random.default_rng(seed)
    std = np.float32(1.0 / np.sqrt(config.hidden_size))
    for name, shape in expected_shapes(config).items():
        if len(shape) == 2:
            yield name, rng.standard_normal(shape, dtype=np.float32) * std


def init_random_weights(config: ArchConfig, seed: int = 0, precision: str = "float") -> ModelWeights:
    """Seeded random weights; matrices N(0, 1/hidden), norm weights all ones."""
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}")
    mats = {}
    for name, w in iter_random_matrices(config, seed):
        mats[name] = quantize_q4(w) if precision == "q4" else w.astype(np.float64)
    return assemble(config, precision, mats)


def assemble(config: ArchConfig, precision: str, tensors: dict) -> ModelWeights:
    """Build ModelWeights from a flat name -> tensor mapping; missing norms default to ones."""
    shapes = expected_shapes(config)
    ones = np.ones(config.hidden_size)
    for name, shape in shapes.items():
        t = tensors.get(name)
        if t is None:
            if len(shape) == 1:
                continue
            raise ValueError(f"missing tensor {name}")
        got = t.shape if not isinstance(t, Q4BlockTensor) else (t.rows, t.cols)
        if tuple(got) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {tuple(got)}")
    layers = []
    for idx in range(config.num_layers):
        fields = {k: tensors[f"layers.{idx}.{k}"] for k in LayerWeights.MATRICES}
        fields.update({k: tensors.get(f"layers.{idx}.{k}", ones) for k in LayerWeights.NORMS})
        layers.append(LayerWeights(**fields))
    return ModelWeights(config, precision, tensors["embedding"], tuple(layers),
                        tensors.get("final_norm", ones))


class KVCache:
    """Per-layer key/value history, each of shape (kv_heads, length, head_dim).

    Storage grows geometrically up to ``context_len``; ``length`` is shared by
    every layer and only moves through :meth:`advance`.
    """

    def __init__(self, config: ArchConfig, initial_capacity: int = 64):
        self.config = config
        self.length = 0
        self._capacity = min(initial_capacity, config.context_len)
        shape = (config.kv_heads, self._capacity, config.head_dim)
        self._keys = [np.zeros(shape) for _ in range(config.num_layers)]
        self._values = [np.zeros(shape) for _ in range(config.num_layers)]

    def _reserve(self, needed: int) -> None:
        if needed <= self._capacity:
            return
        cap = self._capacity
        while cap < needed:
            cap *= 2
        cap = min(cap, self.config.context_len)
        for store in (self._keys, self._values):
            for i, old in enumerate(store):
                new = np.zeros((old.shape[0], cap, old.shape[2]))
                new[:, :self._capacity] = old
                store[i] = new
        self._capacity = cap

    def write(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        """Store k, v of shape (kv_heads, n, head_dim) at positions length..length+n."""
        n = k.shape[1]
        end = self.length + n
        if end > self.config.context_len:
            raise ContextOverflowError(f"cache would hold {end} > context_len {self.config.context_len}")
        self._reserve(end)
        self._keys[layer][:, self.length:end] = k
        self._values[layer][:, self.length:end] = v

    def keys(self, layer: int, upto: int | None = None) -> np.ndarray:
        return self._keys[layer][:, :self.length if upto is None else upto]

    def values(self, layer: int, upto: int | None = None) -> np.ndarray:
        return self._values[layer][:, :self.length if upto is None else upto]

    def advance(self, n: int) -> None:
        if self.length + n > self.config.context_len:
            raise ContextOverflowError("cache advance past context_len")
        self.length += n


def linear(x: np.ndarray, w: np.ndarray | Q4BlockTensor) -> np.ndarray:
    """x @ w.T for x of shape (in,) or (n, in)."""
    if isinstance(w, Q4BlockTensor):
        return q4_matmul(x, w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {w.shape}")
    return x @ w.T


def rmsnorm(x, w, eps: float = RMS_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"rmsnorm length mismatch: {x.shape[-1]} vs {w.shape[-1]}")
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * w


def _act(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "silu":
        return x / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {activation!r}")


def gated_ffn(x, gate_w, up_w, down_w, activation: str = "relu") -> np.ndarray:
    """down(act(gate(x)) * up(x))."""
    x = np.asarray(x, dtype=np.float64)
    return linear(_act(linear(x, gate_w), activation) * linear(x, up_w), down_w)


def softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def attention(x, layer: LayerWeights, cache: KVCache, layer_idx: int, position: int,
              rope: RopeTables | RopeTableQ8, config: ArchConfig, *, return_weights: bool = False):
    """Causal grouped-query attention for n new tokens starting at ``position``.

    ``x`` is (hidden,) for one token or (n, hidden). The new keys and values
    are written into the cache for ``layer_idx``; the caller advances the
    cache length once every layer has run.
    """
    if cache.length != position:
        raise CacheError(f"cache length {cache.length} != position {position}")
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if position + n > config.context_len:
        raise ContextOverflowError(f"positions up to {position + n} exceed context_len {config.context_len}")
    hd, qh, kvh = config.head_dim, config.q_heads, config.kv_heads

    q = linear(x, layer.attn_q).reshape(n, qh, hd)
    k = linear(x, layer.attn_k).reshape(n, kvh, hd)
    v = linear(x, layer.attn_v).reshape(n, kvh, hd)
    positions = np.arange(position, position + n)
    q, k = apply_rope(q, k, rope, positions)
    cache.write(layer_idx, k.transpose(1, 0, 2), v.transpose(1, 0, 2))

    total = position + n
    keys = cache.keys(layer_idx, total)
    values = cache.values(layer_idx, total)
    group = qh // kvh
    if group > 1:
        keys = np.repeat(keys, group, axis=0)
        values = np.repeat(values, group, axis=0)

    scores = np.matmul(q.transpose(1, 0, 2), keys.transpose(0, 2, 1)) / np.sqrt(hd)
    future = np.arange(total)[None, :] > positions[:, None]
    scores = np.where(future[None], -np.inf, scores)
    weights = softmax(scores)
    ctx = np.matmul(weights, values).transpose(1, 0, 2).reshape(n, qh * hd)
    out = linear(ctx, layer.attn_o)
    if single:
        out = out[0]
    if return_weights:
        return out, weights
    return out


def _check_tokens(model: ModelWeights, tokens, cache: KVCache) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size == 0:
        raise TokenError("token list must be a nonempty 1-D sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TokenError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise TokenError(f"token id outside [0, {model.config.vocab_size})")
    if cache.length + ids.size > model.config.context_len:
        raise ContextOverflowError(
            f"{cache.length} cached + {ids.size} new tokens > context_len {model.config.context_len}")
    return ids.astype(np.intp)


def embed(model: ModelWeights, ids: np.ndarray) -> np.ndarray:
    if isinstance(model.embedding, Q4BlockTensor):
        return dequantize_q4_rows(model.embedding, ids)
    return model.embedding[ids]


def ingest(model: ModelWeights, tokens, cache: KVCache, *, all_positions: bool = False) -> np.ndarray:
    """Run tokens through the layer stack and final norm, extending the cache.

    Returns the normalized hidden state of the last new position (or of every
    new position with ``all_positions``), ready for :func:`lm_head`.
    """
    ids = _check_tokens(model, tokens, cache)
    cfg = model.config
    start = cache.length
    rope = model.rope
    x = embed(model, ids)
    for idx, layer in enumerate(model.layers):
        x = x + attention(rmsnorm(x, layer.attn_norm), layer, cache, idx, start, rope, cfg)
        x = x + gated_ffn(rmsnorm(x, layer.ffn_norm), layer.ffn_gate, layer.ffn_up,
                          layer.ffn_down, cfg.activation)
    cache.advance(ids.size)
    return rmsnorm(x if all_positions else x[-1], model.final_norm)


def lm_head(model: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    """Tied output projection: hidden @ embedding.T."""
    return linear(hidden, model.embedding)


def forward(model: ModelWeights, tokens, cache: KVCache, *, all_logits: bool = False) -> np.ndarray:
    """Logits of the last new position, or of every new position with ``all_logits``."""
    return lm_head(model, ingest(model, tokens, cache, all_positions=all_logits))


def prefill(model: ModelWeights, tokens, cache: KVCache) -> np.ndarray:
    """Process a prompt; returns the vocab-sized logits of its last position."""
    return forward(model, tokens, cache)


def decode_step(model: ModelWeights, token: int, cache: KVCache) -> np.ndarray:
    """Feed one token and return the logits for the next."""
    return forward(model, [int(token)], cache)


def greedy_generate(model: ModelWeights, prompt, n_tokens: int, cache: KVCache | None = None) -> list[int]:
    cache = cache if cache is not None else KVCache(model.config)
    logits = prefill(model, prompt, cache)
    out = []
    for _ in range(n_tokens):
        token = int(np.argmax(logits))
        out.append(token)
        logits = decode_step(model, token, cache)
    return out
