"""Distillation pretraining loop, checkpoints and the ablation driver."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dptn
from . import tensor as T
from .data import CorpusConfig, derive_seed, make_corpus, make_views
from .dpade import DECODER_MODES, PatternDecoder, build_decoder, masked_patches, relation_map
from .losses import LossTerms, global_alignment, local_alignment, relation_alignment, total_loss
from .optim import AdamW, Schedule, lr_at
from .teacher import Teacher, resolve_teacher
from .vit import MICRO_STUDENT, MICRO_TEACHER, VIT_B, VIT_TI, ViTConfig, ViTEncoder

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    peak_lr: float = 2e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    total_epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 3.0
    seed: int = 0
    loss_switches: tuple[bool, bool, bool] = (True, True, True)
    decoder_mode: str = "dpade"
    routing: str = "soft"
    num_views: int = 2
    squared_mse: bool = False
    kl_reverse: bool = False
    relation_temperature: str = "ds"
    steps_per_epoch: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.loss_switches = tuple(bool(x) for x in self.loss_switches)
        if not self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")
        if not self.peak_lr > self.min_lr > 0:
            raise ValueError("need peak_lr > min_lr > 0")
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"decoder_mode must be one of {DECODER_MODES}")
        if self.routing not in ("soft", "hard"):
            raise ValueError("routing must be 'soft' or 'hard'")
        if not any(self.loss_switches):
            raise T.UsageError("all three alignment terms are disabled")


@dataclass
class RunConfig:
    """Whole-run description; serialises to the JSON run-config file."""

    student: ViTConfig = MICRO_STUDENT
    teacher_arch: ViTConfig = MICRO_TEACHER
    teacher: str = "synthetic:0"
    teacher_relation: str = "attn"
    data: CorpusConfig = field(default_factory=CorpusConfig)
    optim: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str | None = None

    def to_dict(self) -> dict:
        o = asdict(self.optim)
        return {
            "model": {"student": self.student.to_dict(), "teacher": self.teacher_arch.to_dict()},
            "teacher": {"source": self.teacher, "relation": self.teacher_relation},
            "data": asdict(self.data),
            "optim": {k: o[k] for k in ("batch_size", "peak_lr", "min_lr", "weight_decay", "warmup_epochs",
                                         "total_epochs", "betas", "eps", "clip_norm", "seed", "steps_per_epoch",
                                         "num_views")},
            "losses": {"switches": list(o["loss_switches"]), "squared_mse": o["squared_mse"],
                       "kl_reverse": o["kl_reverse"], "relation_temperature": o["relation_temperature"]},
            "routing": {"decoder_mode": o["decoder_mode"], "mode": o["routing"]},
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls()
        model = d.get("model", {})
        student = ViTConfig(**model["student"]) if "student" in model else base.student
        teacher_arch = ViTConfig(**model["teacher"]) if "teacher" in model else base.teacher_arch
        tblock = d.get("teacher", {})
        if isinstance(tblock, str):
            tblock = {"source": tblock}
        data = d.get("data", {})
        if "persons_per_scene" in data:
            data = {**data, "persons_per_scene": tuple(data["persons_per_scene"])}
        optim = dict(d.get("optim", {}))
        losses = d.get("losses", {})
        routing = d.get("routing", {})
        if "switches" in losses:
            optim["loss_switches"] = tuple(losses["switches"])
        for key in ("squared_mse", "kl_reverse", "relation_temperature"):
            if key in losses:
                optim[key] = losses[key]
        if "decoder_mode" in routing:
            optim["decoder_mode"] = routing["decoder_mode"]
        if "mode" in routing:
            optim["routing"] = routing["mode"]
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(optim) - known
        if unknown:
            raise ValueError(f"unknown optim keys: {sorted(unknown)}")
        return cls(
            student=student,
            teacher_arch=teacher_arch,
            teacher=tblock.get("source", base.teacher),
            teacher_relation=tblock.get("relation", base.teacher_relation),
            data=replace(CorpusConfig(), **data),
            optim=TrainConfig(**optim),
            output_dir=d.get("output_dir"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def micro_run(**optim_overrides) -> RunConfig:
    """Desk-scale preset: 4096 identities x 4 poses, batch 32, 20 epochs."""
    return RunConfig(optim=TrainConfig(**optim_overrides))


def full_scale_run() -> RunConfig:
    """Full-scale pretraining values, kept for documentation; not runnable on a desk CPU."""
    return RunConfig(
        student=VIT_TI,
        teacher_arch=VIT_B,
        data=CorpusConfig(num_identities=250_000, poses_per_identity=4, image_h=256, image_w=128,
                          multi_h=256, multi_w=256),
        optim=TrainConfig(batch_size=2048, peak_lr=2.5e-4, min_lr=1e-6, weight_decay=0.05,
                          warmup_epochs=10, total_epochs=100),
    )


@dataclass
class Batch:
    views: np.ndarray  # B x M x C x H x W
    canonical: np.ndarray  # B x C x H x W
    multi: np.ndarray  # B x C x H2 x W2
    sample_ids: list[int]


class Trainer:
    def __init__(self, run: RunConfig, teacher: Teacher | None = None, dtype=np.float32, cache_dir=None):
        self.run = run
        cfg = run.optim
        self.cfg = cfg
        self.dtype = dtype
        self.teacher = teacher or resolve_teacher(run.teacher, run.teacher_arch, cache_dir=cache_dir,
                                                  relation_mode=run.teacher_relation)
        if self.teacher.cfg.patch_size != run.student.patch_size:
            raise T.DimensionError("student and teacher must share the patch size")
        rng = np.random.default_rng(derive_seed(cfg.seed, 0x57D))
        self.student = ViTEncoder(run.student, rng, dtype)
        self.decoder: PatternDecoder = build_decoder(
            cfg.decoder_mode, run.student.embed_dim, self.teacher.embed_dim, rng, dtype,
            hard_routing=cfg.routing == "hard", relation_temperature=cfg.relation_temperature)
        self.corpus = make_corpus(replace(run.data, seed=cfg.seed))
        named = list(self.student.named_parameters()) + list(self.decoder.named_parameters())
        self.params = [p for _, p in named]
        decay = [p.ndim >= 2 and not n.endswith(("pos_embed", "queries")) for n, p in named]
        self.opt = AdamW(self.params, betas=cfg.betas, weight_decay=cfg.weight_decay, eps=cfg.eps,
                         clip_norm=cfg.clip_norm, decay=decay)
        spe = cfg.steps_per_epoch or max(len(self.corpus) // cfg.batch_size, 1)
        self.schedule = Schedule(cfg.peak_lr, cfg.min_lr, cfg.warmup_epochs * spe, cfg.total_epochs * spe)
        self.step = 0

    @property
    def total_steps(self) -> int:
        return self.schedule.total_steps

    # -- data -------------------------------------------------------------------
    def make_batch(self, step: int) -> Batch:
        """Batch for ``step`` (0-based); a pure function of (seed, step)."""
        cfg = self.cfg
        n_items = len(self.corpus)
        views, canon, multi, ids = [], [], [], []
        orders: dict[int, np.ndarray] = {}
        for j in range(cfg.batch_size):
            n = step * cfg.batch_size + j
            epoch, pos = divmod(n, n_items)
            if epoch not in orders:
                orders[epoch] = self.corpus.order(epoch)
            idx = int(orders[epoch][pos])
            person = self.corpus.person(idx)
            if cfg.loss_switches[0]:
                vb = make_views(person, cfg.num_views, seed=derive_seed(cfg.seed, n, 1))
                views.append(np.stack(vb.views))
            canon.append(person.image)
            if cfg.loss_switches[2]:
                multi.append(self.corpus.scene(derive_seed(cfg.seed, n, 2)).image)
            ids.append(idx)
        return Batch(
            views=np.stack(views) if views else np.zeros((0,)),
            canonical=np.stack(canon),
            multi=np.stack(multi) if multi else np.zeros((0,)),
            sample_ids=ids,
        )

    # -- forward ----------------------------------------------------------------
    def compute_losses(self, batch: Batch) -> LossTerms:
        cfg = self.cfg
        use_g, use_l, use_r = cfg.loss_switches
        b = batch.canonical.shape[0]
        targets = self.teacher.targets(batch.canonical, batch.multi if use_r else None)
        terms = LossTerms(enabled=cfg.loss_switches, num_views=cfg.num_views)
        singles = []
        if use_g:
            singles.append(batch.views.reshape(-1, *batch.views.shape[2:]))
        if use_l:
            singles.append(batch.canonical)
        if singles:
            decoded = self.decoder.decode(self.student(np.concatenate(singles)).tokens)
            offset = 0
            if use_g:
                nv = b * cfg.num_views
                g = decoded[:nv, 0].reshape(b, cfg.num_views, -1)
                terms.global_loss = global_alignment(g, targets.global_target, squared=cfg.squared_mse)
                offset = nv
            if use_l:
                local = masked_patches(decoded[offset:offset + b], targets.shape_mask)
                terms.local_loss = local_alignment(local, targets.local_target, targets.shape_mask,
                                                   squared=cfg.squared_mse)
        if use_r:
            multi_dec = self.decoder.decode(self.student(batch.multi).tokens)
            rel = relation_map(multi_dec[:, 1:], self.decoder.temperature_dim)
            terms.relation_loss = relation_alignment(rel, targets.relation_target, reverse=cfg.kl_reverse)
        total_loss(terms)
        return terms

    def train_step(self, batch: Batch | None = None) -> dict:
        t0 = time.perf_counter()
        batch = batch if batch is not None else self.make_batch(self.step)
        T.reset_tape()
        try:
            terms = self.compute_losses(batch)
            T.backward(terms.total)
        except T.NumericError as exc:
            T.reset_tape()
            raise TrainingDiverged(
                f"non-finite value at step {self.step + 1} (seed {self.cfg.seed}, samples "
                f"{batch.sample_ids}): {exc}") from exc
        for p in self.teacher.parameters():
            if p.grad is not None or p.requires_grad:
                raise AssertionError("teacher parameter received a gradient")
        lr = lr_at(min(self.step + 1, self.total_steps), self.schedule)
        self.opt.step(lr)
        self.step += 1
        vals = terms.values()
        return {"step": self.step, "lr": lr, **vals,
                "wallclock_ms": round((time.perf_counter() - t0) * 1000.0, 3)}

    def fit(self, steps: int | None = None, metrics_path=None, log_every: int = 0) -> list[dict]:
        steps = self.total_steps - self.step if steps is None else steps
        out = []
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            for _ in range(steps):
                rec = self.train_step()
                out.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if log_every and rec["step"] % log_every == 0:
                    log.info("step %d lr %.2e loss %.4f", rec["step"], rec["lr"], rec["loss_total"])
        finally:
            if fh:
                fh.close()
        return out

    # -- checkpoints ------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        state = {}
        state.update(dptn.prefixed(self.student.state_dict(), "student"))
        state.update(dptn.prefixed(self.decoder.state_dict(), "dpade"))
        state.update(dptn.prefixed(self.opt.state_dict(), "optim"))
        return state

    def save_checkpoint(self, directory) -> Path:
        directory = Path(directory)
        extra = {"kind": "dpal-checkpoint", "step": self.step, "config": self.run.to_dict()}
        dptn.save_state(directory, self.state(), extra)
        rng_state = {"seed": self.cfg.seed, "next_step": self.step,
                     "bit_generator": np.random.default_rng(derive_seed(self.cfg.seed, self.step)).bit_generator.state}
        (directory / "rng_state").write_text(json.dumps(rng_state, default=int))
        return directory

    def load_checkpoint(self, directory) -> None:
        state, manifest = dptn.load_state(directory)
        self.student.load_state_dict(dptn.strip_prefix(state, "student"))
        self.decoder.load_state_dict(dptn.strip_prefix(state, "dpade"))
        self.opt.load_state_dict(dptn.strip_prefix(state, "optim"))
        self.step = int(manifest["step"])
        rng_file = Path(directory) / "rng_state"
        if rng_file.exists():
            saved = json.loads(rng_file.read_text())
            if saved["seed"] != self.cfg.seed or saved["next_step"] != self.step:
                raise ValueError("rng_state does not match checkpoint step/seed")

    @classmethod
    def from_checkpoint(cls, directory, teacher: Teacher | None = None, cache_dir=None) -> "Trainer":
        manifest = json.loads((Path(directory) / "manifest.json").read_text())
        tr = cls(RunConfig.from_dict(manifest["config"]), teacher=teacher, cache_dir=cache_dir)
        tr.load_checkpoint(directory)
        return tr


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

LOSS_GRIDS = {
    # rows of the loss-combination table: (global, local, relation)
    "table3": [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (0, 1, 1), (1, 0, 1), (1, 1, 1)],
    "single": [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)],
}
DECODER_GRIDS = {
    "table4": ["none", "dpade"],
    "table5": ["mae_style", "standard_moe", "dpade"],
}


def switch_name(switches) -> str:
    names = [n for n, on in zip(("g", "l", "r"), switches) if on]
    return "+".join(names)


def grid_configs(grid: str) -> list[tuple[str, dict]]:
    """(label, TrainConfig overrides) for a named grid."""
    if grid in LOSS_GRIDS:
        return [(switch_name(s), {"loss_switches": tuple(bool(x) for x in s)}) for s in LOSS_GRIDS[grid]]
    if grid in DECODER_GRIDS:
        return [(m, {"decoder_mode": m}) for m in DECODER_GRIDS[grid]]
    raise ValueError(f"unknown grid {grid!r}; choose from {sorted(LOSS_GRIDS) + sorted(DECODER_GRIDS)}")


def run_ablation(configs: list[tuple[str, dict]], seeds: list[int], base: RunConfig, teacher: Teacher,
                 steps: int | None = None, probe_kwargs: dict | None = None, csv_path=None) -> list[dict]:
    """Pretrain + probe every configuration for every seed; rows are ``config,seed,r1,iou,ari``."""
    from .probes import run_probes

    rows = []
    for label, overrides in configs:
        for seed in seeds:
            run = copy.deepcopy(base)
            run.optim = replace(run.optim, seed=seed, **overrides)
            tr = Trainer(run, teacher=teacher)
            tr.fit(steps)
            rep = run_probes(tr.student, tr.decoder, seed=seed, **(probe_kwargs or {}))
            row = {"config": label, "seed": seed, "r1": rep.retrieval_r1, "iou": rep.mask_iou,
                   "ari": rep.relation_ari}
            log.info("ablation %s seed %d: %s", label, seed, row)
            rows.append(row)
            if csv_path:
                write_csv(csv_path, rows)
    return rows


def write_csv(path, rows: list[dict]) -> None:
    lines = ["config,seed,r1,iou,ari"]
    lines += [f"{r['config']},{r['seed']},{r['r1']:.6f},{r['iou']:.6f},{r['ari']:.6f}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
