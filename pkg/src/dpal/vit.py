"""Patchifying pre-norm vision transformer used for both student and teacher."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param, trunc_normal
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 192
    num_heads: int = 6
    depth: int = 12
    mlp_ratio: float = 4.0
    image_h: int = 256
    image_w: int = 128
    in_chans: int = 3

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise DimensionError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise DimensionError(f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        return asdict(self)


# Standard backbone sizes, plus the desk-scale pair.
VIT_TI = ViTConfig(16, 192, 6, 12)
VIT_S = ViTConfig(16, 384, 6, 12)
VIT_B = ViTConfig(16, 768, 12, 24)
MICRO_STUDENT = ViTConfig(patch_size=8, embed_dim=32, num_heads=4, depth=2, image_h=64, image_w=32)
MICRO_TEACHER = ViTConfig(patch_size=8, embed_dim=48, num_heads=4, depth=4, image_h=64, image_w=32)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(C, H, W) or (B, C, H, W) -> (..., L, C*p*p).

    Patches run row-major from the top-left; each patch is flattened
    channel-major, then row, then column.
    """
    image = np.asarray(image)
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    b, c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    out = image.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return out[0] if squeeze else out


def unpatchify(patches: np.ndarray, patch_size: int, h: int, w: int, channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches)
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    b = patches.shape[0]
    p = patch_size
    gh, gw = h // p, w // p
    out = patches.reshape(b, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, h, w)
    return out[0] if squeeze else out


def _interp_1d(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) linear interpolation, pixel-centre aligned."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def grid_interp_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a row-major token grid as a (dst_L, src_L) matrix."""
    return np.kron(_interp_1d(src[0], dst[0]), _interp_1d(src[1], dst[1]))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        self.dtype = dtype
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.softmax(T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // h)), axis=-1)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out), attn


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.dtype = dtype
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng, dtype=np.float32):
        self.dtype = dtype
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, probs = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, probs

    def make_identity(self) -> None:
        """Zero both residual branches so the block passes its input through."""
        for lin in (self.attn.proj, self.mlp.fc2):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0


@dataclass
class VisionTokens:
    tokens: Tensor  # B x (L+1) x D, global token first
    last_attention: Tensor  # B x heads x (L+1) x (L+1)
    grid: tuple[int, int]

    @property
    def global_token(self) -> Tensor:
        return self.tokens[:, 0]

    @property
    def patch_tokens(self) -> Tensor:
        return self.tokens[:, 1:]


class ViTEncoder(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32):
        self.dtype = dtype
        self._cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.in_chans * cfg.patch_size ** 2, d, rng, dtype, init="trunc_normal")
        self.cls_token = param(trunc_normal(rng, (d,)), dtype)
        self.pos_embed = param(trunc_normal(rng, (cfg.num_patches + 1, d)), dtype)
        self.blocks = [Block(d, cfg.num_heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]
        self._interp_cache: dict = {}

    @property
    def cfg(self) -> ViTConfig:
        return self._cfg

    def _pos_for(self, grid: tuple[int, int]) -> Tensor:
        if grid == self.cfg.grid:
            return self.pos_embed
        key = (grid, np.dtype(self.dtype).str)
        if key not in self._interp_cache:
            self._interp_cache[key] = Tensor(grid_interp_matrix(self.cfg.grid, grid), dtype=self.dtype)
        patches = T.matmul(self._interp_cache[key], self.pos_embed[1:])
        return T.concat([self.pos_embed[0:1], patches], axis=0)

    def __call__(self, images) -> VisionTokens:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        b, c, h, w = images.shape
        p = self.cfg.patch_size
        if c != self.cfg.in_chans:
            raise DimensionError(f"expected {self.cfg.in_chans} channels, got {c}")
        grid = (h // p, w // p)
        x = self.patch_embed(Tensor(patchify(images, p)))
        cls = T.broadcast_to(self.cls_token.reshape(1, 1, -1), (b, 1, self.cfg.embed_dim))
        x = T.concat([cls, x], axis=1) + self._pos_for(grid)
        probs = None
        for blk in self.blocks:
            x, probs = blk(x)
        return VisionTokens(x, probs, grid)


def encode(image: np.ndarray, cfg: ViTConfig, params: ViTEncoder) -> VisionTokens:
    if params.cfg != cfg:
        raise DimensionError("encoder weights were built for a different config")
    return params(image)
