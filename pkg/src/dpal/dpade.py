"""Dynamic pattern decoder and the baseline decoders it is compared against.

Every decoder maps student tokens ``B x (L+1) x D_s`` to ``B x (L+1) x D_t``
via :meth:`decode`; the three pattern extractions are shared.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param, trunc_normal
from .tensor import DimensionError, Tensor, UsageError
from .vit import Block

NUM_EXPERTS = 3
DECODER_MODES = ("dpade", "none", "mae_style", "standard_moe")


class SingleHeadAttention(Module):
    """``softmax(q k^T / sqrt(d)) v`` followed by an output projection."""

    def __init__(self, dim: int, rng, dtype=np.float32):
        self.dtype = dtype
        self.dim = dim
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.o = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        scores = T.matmul(self.q(x), self.k(context).swapaxes(-1, -2)) * (1.0 / np.sqrt(self.dim))
        return self.o(T.matmul(T.softmax(scores, axis=-1), self.v(context)))

    def zero_(self) -> None:
        for lin in (self.q, self.k, self.v, self.o):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0


class PatternDecoder(Module):
    """Shared pattern extraction on top of a concrete ``decode``."""

    d_s: int
    d_t: int
    relation_temperature: str = "ds"

    def decode(self, tokens: Tensor) -> Tensor:
        raise NotImplementedError

    def extract_global(self, tokens: Tensor) -> Tensor:
        return self.decode(tokens)[:, 0]

    def extract_local(self, tokens: Tensor, mask: np.ndarray) -> Tensor:
        return masked_patches(self.decode(tokens), mask)

    def extract_relation(self, tokens: Tensor) -> Tensor:
        return relation_map(self.decode(tokens)[:, 1:], self.temperature_dim)

    @property
    def temperature_dim(self) -> int:
        return self.d_s if self.relation_temperature == "ds" else self.d_t


def masked_patches(decoded: Tensor, mask: np.ndarray) -> Tensor:
    """Patch rows of ``decoded`` with row ``i`` multiplied by ``mask[i]``."""
    patches = decoded[:, 1:]
    mask = np.asarray(mask)
    if mask.ndim == 1 and mask.shape[0] == patches.shape[1]:
        mask = np.broadcast_to(mask, patches.shape[:2])
    if mask.shape != patches.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match {patches.shape[:2]} patches")
    return patches * mask[..., None].astype(patches.dtype)


def relation_map(patches: Tensor, temperature_dim: int) -> Tensor:
    """Row-softmax of the patch Gram matrix scaled by ``1/sqrt(temperature_dim)``."""
    if patches.shape[-2] == 0:
        raise UsageError("relation pattern needs at least one patch")
    gram = T.matmul(patches, patches.swapaxes(-1, -2)) * (1.0 / np.sqrt(temperature_dim))
    return T.softmax(gram, axis=-1)


class Router(Module):
    """Router token cross-attends to the visual tokens; pooled result -> 3 logits."""

    def __init__(self, d_s: int, rng, dtype=np.float32, hard: bool = False):
        self.dtype = dtype
        self.hard = hard
        self.router_token = param(trunc_normal(rng, (d_s,)), dtype)
        self.norm = LayerNorm(d_s, dtype)
        self.attn = SingleHeadAttention(d_s, rng, dtype)
        self.head = Linear(d_s, NUM_EXPERTS, rng, dtype, init="trunc_normal")

    def logits(self, tokens: Tensor) -> Tensor:
        b = tokens.shape[0]
        q = T.broadcast_to(self.router_token.reshape(1, 1, -1), (b, 1, tokens.shape[-1]))
        pooled = q + self.attn(q, self.norm(tokens))
        return self.head(pooled)[:, 0]

    def __call__(self, tokens: Tensor) -> Tensor:
        probs = T.softmax(self.logits(tokens), axis=-1)
        if self.hard:
            return T.straight_through_onehot(probs)
        return probs


def mix_linear_experts(x: Tensor, weights: Tensor, biases: Tensor, mix: Tensor) -> Tensor:
    """``sum_i mix_i * (x W_i + b_i)`` for batched per-image experts.

    x: B x N x D_s, weights: B x E x D_s x D_t (or E x D_s x D_t),
    biases: B x E x D_t (or E x D_t), mix: B x E.
    """
    b = x.shape[0]
    if weights.shape[-2] != x.shape[-1]:
        raise DimensionError(f"expert input width {weights.shape[-2]} != token width {x.shape[-1]}")
    e, d_t = weights.shape[-3], weights.shape[-1]
    if biases.ndim == 2:
        biases = biases.reshape(1, e, d_t)
    y = T.matmul(x.reshape(b, 1, *x.shape[1:]), weights) + biases.reshape(biases.shape[0], e, 1, d_t)
    return (y * mix.reshape(b, e, 1, 1)).sum(axis=1)


class ExpertGenerator(Module):
    """Pattern queries -> self-attn -> cross-attn over visual tokens -> FFN -> expert weights."""

    def __init__(self, d_s: int, d_t: int, rng, dtype=np.float32, hidden_ratio: int = 4):
        self.dtype = dtype
        self.d_s, self.d_t = d_s, d_t
        self.queries = param(trunc_normal(rng, (NUM_EXPERTS, d_s)), dtype)
        self.norm_sa = LayerNorm(d_s, dtype)
        self.self_attn = SingleHeadAttention(d_s, rng, dtype)
        self.norm_q = LayerNorm(d_s, dtype)
        self.norm_kv = LayerNorm(d_s, dtype)
        self.cross_attn = SingleHeadAttention(d_s, rng, dtype)
        self.norm_ffn = LayerNorm(d_s, dtype)
        self.fc1 = Linear(d_s, hidden_ratio * d_s, rng, dtype)
        self.fc2 = Linear(hidden_ratio * d_s, self.param_count, rng, dtype)

    @property
    def param_count(self) -> int:
        return self.d_s * self.d_t + self.d_t

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        b, _, d = tokens.shape
        if d != self.d_s:
            raise DimensionError(f"generator expects width {self.d_s}, tokens have {d}")
        q = T.broadcast_to(self.queries.reshape(1, NUM_EXPERTS, d), (b, NUM_EXPERTS, d))
        q = q + self.self_attn(self.norm_sa(q))
        q = q + self.cross_attn(self.norm_q(q), self.norm_kv(tokens))
        flat = self.fc2(T.gelu(self.fc1(self.norm_ffn(q))))
        n_w = self.d_s * self.d_t
        weights = flat[:, :, :n_w].reshape(b, NUM_EXPERTS, self.d_s, self.d_t) * (1.0 / np.sqrt(self.d_s))
        biases = flat[:, :, n_w:]
        return weights, biases


class DynamicPatternDecoder(PatternDecoder):
    def __init__(self, d_s: int, d_t: int, rng: np.random.Generator, dtype=np.float32,
                 hard_routing: bool = False, relation_temperature: str = "ds"):
        self.dtype = dtype
        self.d_s, self.d_t = d_s, d_t
        self.relation_temperature = relation_temperature
        self.generator = ExpertGenerator(d_s, d_t, rng, dtype)
        self.router = Router(d_s, rng, dtype, hard=hard_routing)
        self.self_attn = SingleHeadAttention(d_s, rng, dtype)

    def generate_experts(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        return self.generator(tokens)

    def route(self, tokens: Tensor) -> Tensor:
        return self.router(tokens)

    def decode_tokens(self, tokens: Tensor, experts: tuple[Tensor, Tensor], weights: Tensor) -> Tensor:
        x = tokens + self.self_attn(tokens)
        return mix_linear_experts(x, experts[0], experts[1], weights)

    def decode(self, tokens: Tensor) -> Tensor:
        return self.decode_tokens(tokens, self.generate_experts(tokens), self.route(tokens))


class StaticMoEDecoder(PatternDecoder):
    """Three fixed linear experts mixed by the same router (no weight generation)."""

    def __init__(self, d_s: int, d_t: int, rng, dtype=np.float32, hard_routing: bool = False,
                 relation_temperature: str = "ds"):
        self.dtype = dtype
        self.d_s, self.d_t = d_s, d_t
        self.relation_temperature = relation_temperature
        self.expert_weights = param(
            np.stack([rng.uniform(-1, 1, (d_s, d_t)) * np.sqrt(6.0 / (d_s + d_t)) for _ in range(NUM_EXPERTS)]),
            dtype)
        self.expert_biases = param(np.zeros((NUM_EXPERTS, d_t)), dtype)
        self.router = Router(d_s, rng, dtype, hard=hard_routing)
        self.self_attn = SingleHeadAttention(d_s, rng, dtype)

    def decode(self, tokens: Tensor) -> Tensor:
        x = tokens + self.self_attn(tokens)
        return mix_linear_experts(x, self.expert_weights, self.expert_biases, self.router(tokens))


class LinearDecoder(PatternDecoder):
    """No decoder: one shared projection D_s -> D_t on the raw student tokens."""

    def __init__(self, d_s: int, d_t: int, rng, dtype=np.float32, relation_temperature: str = "ds", **_):
        self.dtype = dtype
        self.d_s, self.d_t = d_s, d_t
        self.relation_temperature = relation_temperature
        self.proj = Linear(d_s, d_t, rng, dtype)

    def decode(self, tokens: Tensor) -> Tensor:
        return self.proj(tokens)


class MAEStyleDecoder(PatternDecoder):
    """Two plain transformer blocks followed by a projection."""

    def __init__(self, d_s: int, d_t: int, rng, dtype=np.float32, num_heads: int = 4,
                 relation_temperature: str = "ds", **_):
        self.dtype = dtype
        self.d_s, self.d_t = d_s, d_t
        self.relation_temperature = relation_temperature
        self.blocks = [Block(d_s, num_heads, 4.0, rng, dtype) for _ in range(2)]
        self.proj = Linear(d_s, d_t, rng, dtype)

    def decode(self, tokens: Tensor) -> Tensor:
        x = tokens
        for blk in self.blocks:
            x, _ = blk(x)
        return self.proj(x)


def build_decoder(mode: str, d_s: int, d_t: int, rng, dtype=np.float32, hard_routing: bool = False,
                  relation_temperature: str = "ds") -> PatternDecoder:
    if mode == "dpade":
        return DynamicPatternDecoder(d_s, d_t, rng, dtype, hard_routing, relation_temperature)
    if mode == "standard_moe":
        return StaticMoEDecoder(d_s, d_t, rng, dtype, hard_routing, relation_temperature)
    if mode == "none":
        return LinearDecoder(d_s, d_t, rng, dtype, relation_temperature)
    if mode == "mae_style":
        return MAEStyleDecoder(d_s, d_t, rng, dtype, relation_temperature=relation_temperature)
    raise ValueError(f"unknown decoder mode {mode!r}; expected one of {DECODER_MODES}")
