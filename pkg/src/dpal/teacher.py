"""Frozen teacher encoder and the alignment targets it provides."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dptn
from . import tensor as T
from .data import CorpusConfig, SyntheticCorpus, derive_seed, make_appearance, patch_labels, render_person
from .nn import Linear
from .optim import AdamW, Schedule, lr_at
from .tensor import Tensor
from .vit import MICRO_TEACHER, VisionTokens, ViTConfig, ViTEncoder, patchify

log = logging.getLogger(__name__)

WARMUP_IDENTITY_OFFSET = 2_000_000
TIE_RTOL = 1e-9

# Warm-up recipe of the synthetic teacher. Bump WARMUP_RECIPE whenever any of
# these change so cached teachers are rebuilt.
WARMUP_RECIPE = "v4"
WARM_STEPS = 600
CODE_WEIGHT = 20.0
ENERGY_FG, ENERGY_BG = 2.0, 0.25
SCENES_PER_STEP = 8


@dataclass
class TeacherTargets:
    global_target: np.ndarray  # B x D_t
    local_target: np.ndarray  # B x L x D_t, zero rows outside the mask
    shape_mask: np.ndarray  # B x L in {0, 1}
    relation_target: np.ndarray | None = None  # B x L2 x L2, row-stochastic


def saliency_mask(saliency: np.ndarray) -> np.ndarray:
    """``1`` where saliency reaches the per-image mean; ties at the mean are kept."""
    s = np.asarray(saliency, dtype=np.float64)
    mu = s.mean(axis=-1, keepdims=True)
    tol = TIE_RTOL * np.maximum(np.abs(mu), 1e-300)
    return (s >= mu - tol).astype(np.float64)


def attention_relation(last_attention: np.ndarray) -> np.ndarray:
    """Patch-to-patch block of the head-averaged attention, rows renormalised."""
    a = np.asarray(last_attention, dtype=np.float64).mean(axis=-3)[..., 1:, 1:]
    return a / a.sum(axis=-1, keepdims=True)


def similarity_relation(patch_tokens: np.ndarray) -> np.ndarray:
    p = np.asarray(patch_tokens, dtype=np.float64)
    g = p @ np.swapaxes(p, -1, -2) / np.sqrt(p.shape[-1])
    g = np.exp(g - g.max(axis=-1, keepdims=True))
    return g / g.sum(axis=-1, keepdims=True)


class Teacher:
    """Wraps a frozen :class:`ViTEncoder`; every output is a plain numpy array."""

    def __init__(self, encoder: ViTEncoder, relation_mode: str = "attn"):
        if relation_mode not in ("attn", "sim"):
            raise ValueError(f"relation_mode must be 'attn' or 'sim', got {relation_mode!r}")
        encoder.freeze()
        self.encoder = encoder
        self.relation_mode = relation_mode

    @property
    def cfg(self) -> ViTConfig:
        return self.encoder.cfg

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters()

    def encode(self, images) -> VisionTokens:
        with T.no_grad():
            return self.encoder(images)

    def global_target(self, images) -> np.ndarray:
        return self.encode(images).tokens.data[:, 0].copy()

    def shape_mask(self, images=None, tokens: VisionTokens | None = None) -> np.ndarray:
        tokens = tokens or self.encode(images)
        sal = tokens.last_attention.data.mean(axis=1)[:, 0, 1:]
        return saliency_mask(sal)

    def local_target(self, images=None, mask=None, tokens: VisionTokens | None = None) -> np.ndarray:
        tokens = tokens or self.encode(images)
        if mask is None:
            mask = self.shape_mask(tokens=tokens)
        return tokens.tokens.data[:, 1:] * np.asarray(mask, dtype=tokens.tokens.dtype)[..., None]

    def relation_target(self, images) -> np.ndarray:
        tokens = self.encode(images)
        if self.relation_mode == "sim":
            return similarity_relation(tokens.tokens.data[:, 1:])
        return attention_relation(tokens.last_attention.data)

    def targets(self, single_images, multi_images=None) -> TeacherTargets:
        tokens = self.encode(single_images)
        mask = self.shape_mask(tokens=tokens)
        rel = self.relation_target(multi_images) if multi_images is not None else None
        return TeacherTargets(
            global_target=tokens.tokens.data[:, 0].copy(),
            local_target=self.local_target(mask=mask, tokens=tokens),
            shape_mask=mask,
            relation_target=rel,
        )

    # -- persistence ----------------------------------------------------------
    def save(self, directory) -> None:
        extra = {"kind": "teacher", "vit": self.cfg.to_dict(), "relation_mode": self.relation_mode}
        dptn.save_state(directory, self.encoder.state_dict(), extra)

    @classmethod
    def load(cls, directory, dtype=np.float32, relation_mode: str | None = None) -> "Teacher":
        state, manifest = dptn.load_state(directory)
        cfg = ViTConfig(**manifest["vit"])
        enc = ViTEncoder(cfg, np.random.default_rng(0), dtype)
        enc.load_state_dict(state)
        return cls(enc, relation_mode or manifest.get("relation_mode", "attn"))


def make_synthetic_teacher(seed: int, cfg: ViTConfig = MICRO_TEACHER, warm_steps: int = WARM_STEPS,
                           batch_size: int = 32, lr: float = 5e-3, dtype=np.float32,
                           relation_mode: str = "attn", scenes_per_step: int = SCENES_PER_STEP) -> Teacher:
    """Seeded random encoder, warmed up on rendered persons, then frozen.

    Warm-up targets, all from renderer ground truth:
      * patch tokens reconstruct their pixels plus the foreground alpha;
      * the global token regresses the person's appearance code;
      * foreground patch tokens regress their owner's appearance code, zero
        on background, on single persons and on copy-paste scenes;
      * mean squared token activation is high on foreground and low on
        background.
    The point is a teacher whose attention and token norms carry shape and
    instance structure the student can be distilled from.
    """
    rng = np.random.default_rng(derive_seed(seed, 0x7EAC))
    enc = ViTEncoder(cfg, rng, dtype)
    p = cfg.patch_size
    pix_dim = cfg.in_chans * p * p + p * p
    code_dim = len(render_person(0, 0, cfg.image_h, cfg.image_w).appearance.code())
    pix_head = Linear(cfg.embed_dim, pix_dim, rng, dtype)
    code_head = Linear(cfg.embed_dim, code_dim, rng, dtype)
    inst_head = Linear(cfg.embed_dim, code_dim, rng, dtype)
    params = enc.parameters() + pix_head.parameters() + code_head.parameters() + inst_head.parameters()
    opt = AdamW(params, weight_decay=0.0, clip_norm=3.0)
    sched = Schedule(lr, lr * 0.1, max(warm_steps // 10, 1), max(warm_steps, 1))
    scenes = SyntheticCorpus(CorpusConfig(num_identities=100_000, poses_per_identity=1000,
                                          image_h=cfg.image_h, image_w=cfg.image_w,
                                          identity_offset=WARMUP_IDENTITY_OFFSET, seed=derive_seed(seed, 7)))

    def energy_loss(patch_tokens, fg):
        target = (ENERGY_BG + (ENERGY_FG - ENERGY_BG) * fg).astype(dtype)
        return T.square(T.square(patch_tokens).mean(axis=-1) - target).mean()

    for step in range(warm_steps):
        srng = np.random.default_rng(derive_seed(seed, step, 0x3A3))
        ids = srng.integers(WARMUP_IDENTITY_OFFSET, WARMUP_IDENTITY_OFFSET + 100_000, batch_size)
        poses = srng.integers(0, 1000, batch_size)
        persons = [render_person(int(i), int(q), cfg.image_h, cfg.image_w) for i, q in zip(ids, poses)]
        images = np.stack([x.image for x in persons])
        alpha = np.stack([x.fg_mask for x in persons]).astype(np.float64)[:, None]
        target_pix = np.concatenate([patchify(images, p), patchify(alpha, p)], axis=-1)
        target_code = np.stack([x.appearance.code() for x in persons])
        fg = patchify(alpha, p).mean(-1) > 0.5  # B x L
        target_inst = target_code[:, None, :] * fg[..., None]

        T.reset_tape()
        tokens = enc(images)
        pt = tokens.patch_tokens
        loss = (T.square(pix_head(pt) - target_pix.astype(dtype)).mean()
                + CODE_WEIGHT * T.square(code_head(tokens.global_token) - target_code.astype(dtype)).mean()
                + T.square(inst_head(pt) - target_inst.astype(dtype)).mean()
                + energy_loss(pt, fg))
        if scenes_per_step:
            batch = [scenes.scene(derive_seed(step, j)) for j in range(scenes_per_step)]
            mt = enc(np.stack([s.image for s in batch])).patch_tokens
            labels = np.stack([patch_labels(s.instance_map, p) for s in batch])
            codes = [np.concatenate([np.zeros((1, code_dim)),
                                     np.stack([make_appearance(i).code() for i in s.identity_ids])])
                     for s in batch]
            target_inst = np.stack([c[lab] for c, lab in zip(codes, labels)])
            loss = (loss + T.square(inst_head(mt) - target_inst.astype(dtype)).mean()
                    + energy_loss(mt, labels > 0))
        T.backward(loss)
        opt.step(lr_at(step, sched))
        if step % 50 == 0 or step == warm_steps - 1:
            log.debug("teacher warm-up step %d loss %.4f", step, float(loss.data))
    T.reset_tape()
    return Teacher(enc, relation_mode)


def resolve_teacher(spec: str, cfg: ViTConfig = MICRO_TEACHER, cache_dir=None, **kwargs) -> Teacher:
    """``synthetic:SEED`` or a checkpoint directory. Synthetic teachers are
    cached under ``cache_dir`` when given."""
    if spec.startswith("synthetic:"):
        seed = int(spec.split(":", 1)[1])
        if cache_dir is not None:
            warm = {k: kwargs[k] for k in ("warm_steps", "batch_size", "lr", "scenes_per_step") if k in kwargs}
            key = f"teacher-{WARMUP_RECIPE}-s{seed}-" + "-".join(str(v) for v in cfg.to_dict().values())
            if warm:
                key += "-" + "-".join(f"{k}{v}" for k, v in sorted(warm.items()))
            path = Path(cache_dir) / key
            if (path / "manifest.json").exists():
                return Teacher.load(path, relation_mode=kwargs.get("relation_mode"))
            teacher = make_synthetic_teacher(seed, cfg, **kwargs)
            teacher.save(path)
            return teacher
        return make_synthetic_teacher(seed, cfg, **kwargs)
    path = Path(spec)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"teacher directory {spec} has no manifest.json")
    return Teacher.load(path, relation_mode=kwargs.get("relation_mode"))


def describe(teacher: Teacher) -> str:
    return json.dumps({"vit": teacher.cfg.to_dict(), "params": teacher.encoder.num_parameters()})
