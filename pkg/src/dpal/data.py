"""Procedural person images, copy-paste scenes, multi-view augmentation, PPM I/O."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integer parts (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(int(p).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little") >> 1


# ---------------------------------------------------------------------------
# Person rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Appearance:
    skin: tuple[float, float, float]
    top: tuple[float, float, float]
    bottom: tuple[float, float, float]
    stripe_freq: float
    stripe_vertical: bool
    build: float

    def code(self) -> np.ndarray:
        """Flat numeric description (used as a regression target during teacher warm-up)."""
        return np.array(
            [*self.skin, *self.top, *self.bottom, self.stripe_freq / 6.0,
             float(self.stripe_vertical), self.build],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class Pose:
    scale: float
    dx: float
    dy: float
    arm_angles: tuple[float, float]
    leg_angles: tuple[float, float]
    bg_top: tuple[float, float, float]
    bg_bottom: tuple[float, float, float]


@dataclass
class SyntheticPerson:
    identity_id: int
    appearance: Appearance
    pose: Pose
    image: np.ndarray  # 3 x H x W in [0, 1]
    fg_mask: np.ndarray  # H x W bool


def make_appearance(identity_id: int) -> Appearance:
    rng = np.random.default_rng(derive_seed(identity_id, 0xA11))
    return Appearance(
        skin=tuple(rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7])),
        top=tuple(rng.uniform(0.05, 0.95, 3)),
        bottom=tuple(rng.uniform(0.05, 0.95, 3)),
        stripe_freq=float(rng.uniform(2.0, 6.0)),
        stripe_vertical=bool(rng.random() < 0.5),
        build=float(rng.uniform(0.8, 1.2)),
    )


def make_pose(identity_id: int, pose_seed: int) -> Pose:
    rng = np.random.default_rng(derive_seed(identity_id, pose_seed, 0x905E))
    return Pose(
        scale=float(rng.uniform(0.75, 1.0)),
        dx=float(rng.uniform(-0.12, 0.12)),
        dy=float(rng.uniform(-0.04, 0.04)),
        arm_angles=tuple(rng.uniform(0.05, 0.6, 2)),
        leg_angles=tuple(rng.uniform(0.0, 0.3, 2)),
        bg_top=tuple(rng.uniform(0.0, 1.0, 3)),
        bg_bottom=tuple(rng.uniform(0.0, 1.0, 3)),
    )


def _capsule(yy, xx, y0, x0, y1, x1, radius):
    """Pixels within ``radius`` of the segment (y0, x0)-(y1, x1)."""
    vy, vx = y1 - y0, x1 - x0
    t = ((yy - y0) * vy + (xx - x0) * vx) / max(vy * vy + vx * vx, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    dy, dx = yy - (y0 + t * vy), xx - (x0 + t * vx)
    return dy * dy + dx * dx <= radius * radius


def gradient_background(h: int, w: int, top, bottom) -> np.ndarray:
    t = ((np.arange(h) + 0.5) / h)[None, :, None]
    top = np.asarray(top)[:, None, None]
    bottom = np.asarray(bottom)[:, None, None]
    return np.broadcast_to(top * (1 - t) + bottom * t, (3, h, w)).copy()


def render_person(identity_seed: int, pose_seed: int, h: int = 64, w: int = 32) -> SyntheticPerson:
    """Deterministic stick-figure person: gradient background, ellipse torso,
    circle head and capsule limbs. Colours and stripe texture are keyed by
    identity; placement, limb angles and background by (identity, pose)."""
    app = make_appearance(identity_seed)
    pose = make_pose(identity_seed, pose_seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    ph = 0.92 * h * pose.scale
    top_y = (h - ph) / 2 + pose.dy * h
    cx = w / 2 + pose.dx * w
    head_r = 0.08 * ph
    head_cy = top_y + head_r
    torso_top = top_y + 2 * head_r
    torso_ry = 0.2 * ph
    torso_rx = min(0.11 * ph * app.build, 0.42 * w)
    torso_cy = torso_top + torso_ry
    hip_y = torso_cy + 0.85 * torso_ry

    head = (yy - head_cy) ** 2 + (xx - cx) ** 2 <= head_r ** 2
    torso = ((yy - torso_cy) / torso_ry) ** 2 + ((xx - cx) / torso_rx) ** 2 <= 1.0

    limb_w = 0.035 * ph
    legs = np.zeros((h, w), bool)
    for side, ang in zip((-1, 1), pose.leg_angles):
        x0 = cx + side * 0.45 * torso_rx
        length = 0.4 * ph
        legs |= _capsule(yy, xx, hip_y, x0, hip_y + length * np.cos(ang),
                         x0 + side * length * np.sin(ang), limb_w)
    arms = np.zeros((h, w), bool)
    shoulder_y = torso_top + 0.25 * torso_ry
    for side, ang in zip((-1, 1), pose.arm_angles):
        x0 = cx + side * 0.8 * torso_rx
        length = 0.32 * ph
        arms |= _capsule(yy, xx, shoulder_y, x0, shoulder_y + length * np.cos(ang),
                         x0 + side * length * np.sin(ang), 0.8 * limb_w)

    img = gradient_background(h, w, pose.bg_top, pose.bg_bottom)
    coord = (xx - cx) / ph if app.stripe_vertical else (yy - torso_top) / ph
    stripes = 0.8 + 0.2 * np.sin(2 * np.pi * app.stripe_freq * coord * 2.5)
    top = np.asarray(app.top)[:, None, None] * stripes[None]
    layers = [
        (legs, np.broadcast_to(np.asarray(app.bottom)[:, None, None], (3, h, w))),
        (arms, 0.85 * top),
        (torso, top),
        (head, np.broadcast_to(np.asarray(app.skin)[:, None, None], (3, h, w))),
    ]
    fg = np.zeros((h, w), bool)
    for m, colour in layers:
        img[:, m] = colour[:, m]
        fg |= m
    return SyntheticPerson(identity_seed, app, pose, np.clip(img, 0.0, 1.0), fg)


# ---------------------------------------------------------------------------
# Copy-paste multi-person scenes
# ---------------------------------------------------------------------------


@dataclass
class MultiPersonScene:
    image: np.ndarray  # 3 x H2 x W2
    instance_map: np.ndarray  # H2 x W2 int, 0 = background
    count: int
    identity_ids: list[int] = field(default_factory=list)


class PlacementError(RuntimeError):
    pass


def _nearest_resize_index(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int)
    return np.clip(idx, 0, n_in - 1)


def compose_multi(persons: list[SyntheticPerson], canvas_h: int, canvas_w: int, seed: int,
                  placements: list[tuple[int, int, float]] | None = None,
                  scale_range: tuple[float, float] = (0.5, 1.0), max_tries: int = 10) -> MultiPersonScene:
    """Paste each person's foreground onto a gradient canvas, later pastes on top.

    ``placements`` optionally fixes ``(top, left, scale)`` per person.
    """
    if not 1 <= len(persons) <= 4:
        raise ValueError(f"compose_multi supports 1..4 persons, got {len(persons)}")
    rng = np.random.default_rng(derive_seed(seed, 0xC0DE))
    canvas = gradient_background(canvas_h, canvas_w, rng.uniform(0, 1, 3), rng.uniform(0, 1, 3))
    inst = np.zeros((canvas_h, canvas_w), dtype=np.int64)
    for k, person in enumerate(persons, start=1):
        _, h, w = person.image.shape
        for _ in range(max_tries):
            if placements is not None:
                top, left, s = placements[k - 1]
            else:
                s = float(rng.uniform(*scale_range))
            hs, ws = max(1, round(h * s)), max(1, round(w * s))
            if hs <= canvas_h and ws <= canvas_w:
                break
            if placements is not None:
                raise PlacementError(f"person {k} ({hs}x{ws}) does not fit {canvas_h}x{canvas_w}")
        else:
            raise PlacementError(f"person {k} did not fit the canvas after {max_tries} tries")
        if placements is None:
            top = int(rng.integers(0, canvas_h - hs + 1))
            left = int(rng.integers(0, canvas_w - ws + 1))
        iy = _nearest_resize_index(h, hs)
        ix = _nearest_resize_index(w, ws)
        img = person.image[:, iy][:, :, ix]
        m = person.fg_mask[iy][:, ix]
        region = (slice(top, top + hs), slice(left, left + ws))
        canvas[:, region[0], region[1]][:, m] = img[:, m]
        inst[region][m] = k
    return MultiPersonScene(canvas, inst, len(persons), [p.identity_id for p in persons])


def patch_labels(label_map: np.ndarray, patch: int) -> np.ndarray:
    """Majority label inside each patch (row-major), ties to the smaller label."""
    h, w = label_map.shape
    blocks = label_map.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(-1, patch * patch)
    n_lab = int(label_map.max()) + 1
    counts = np.stack([(blocks == k).sum(axis=1) for k in range(n_lab)], axis=1)
    return counts.argmax(axis=1)



# ---------------------------------------------------------------------------
# Multi-view augmentation
# ---------------------------------------------------------------------------


@dataclass
class ViewBatch:
    views: list[np.ndarray]
    canonical: np.ndarray
    identity_id: int


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Bilinear resample of ``img`` (C x H x W), optionally of the sub-box
    ``(top, left, height, width)``, to ``out_h x out_w`` (pixel-centre aligned)."""
    c, h, w = img.shape
    top, left, bh, bw = box if box is not None else (0, 0, h, w)
    ys = top + (np.arange(out_h) + 0.5) * bh / out_h - 0.5
    xs = left + (np.arange(out_w) + 0.5) * bw / out_w - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([map_coordinates(img[i], [gy, gx], order=1, mode="nearest") for i in range(c)])


def make_views(person: SyntheticPerson, m: int, seed: int, crop: bool = True, flip: bool = True,
               jitter: bool = True, area=(0.4, 1.0)) -> ViewBatch:
    if m < 1:
        raise ValueError("make_views needs M >= 1")
    rng = np.random.default_rng(derive_seed(seed, 0x7135))
    canonical = person.image
    _, h, w = canonical.shape
    views = []
    for _ in range(m):
        v = canonical
        if crop:
            a = rng.uniform(*area)
            r = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
            ch = int(np.clip(round(h * np.sqrt(a / r)), 1, h))
            cw = int(np.clip(round(w * np.sqrt(a * r)), 1, w))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            v = resize_bilinear(v, h, w, (top, left, ch, cw))
        if flip and rng.random() < 0.5:
            v = v[:, :, ::-1]
        if jitter:
            bright = rng.uniform(-0.2, 0.2, 3)[:, None, None]
            contrast = rng.uniform(0.8, 1.2, 3)[:, None, None]
            mu = v.mean(axis=(1, 2), keepdims=True)
            v = (v - mu) * contrast + mu + bright
        views.append(np.clip(v, 0.0, 1.0).copy())
    return ViewBatch(views, canonical, person.identity_id)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    num_identities: int = 4096
    poses_per_identity: int = 4
    image_h: int = 64
    image_w: int = 32
    multi_h: int = 64
    multi_w: int = 64
    persons_per_scene: tuple[int, int] = (2, 4)
    identity_offset: int = 0
    seed: int = 0
    image_dir: str | None = None  # single-person images from PPM files instead of the renderer


class SyntheticCorpus:
    """Index -> (identity, pose) is a pure function of the config."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg

    def __len__(self) -> int:
        return self.cfg.num_identities * self.cfg.poses_per_identity

    def locate(self, index: int) -> tuple[int, int]:
        ident, pose = divmod(int(index), self.cfg.poses_per_identity)
        return self.cfg.identity_offset + ident, pose

    def person(self, index: int) -> SyntheticPerson:
        ident, pose = self.locate(index)
        return render_person(ident, pose, self.cfg.image_h, self.cfg.image_w)

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(self.cfg.seed, epoch, 0x0D))
        return rng.permutation(len(self))

    def scene(self, key: int) -> MultiPersonScene:
        """Multi-person scene for an arbitrary integer key, persons drawn from this corpus."""
        rng = np.random.default_rng(derive_seed(self.cfg.seed, key, 0x5CE))
        lo, hi = self.cfg.persons_per_scene
        k = int(rng.integers(lo, hi + 1))
        picks = rng.choice(len(self), size=k, replace=False)
        persons = [self.person(int(i)) for i in picks]
        return compose_multi(persons, self.cfg.multi_h, self.cfg.multi_w, seed=derive_seed(self.cfg.seed, key))


# ---------------------------------------------------------------------------
# PPM ingestion
# ---------------------------------------------------------------------------


class PPMError(ValueError):
    pass


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte precedes the raster


def read_ppm(path) -> np.ndarray:
    """Binary P6 with maxval 255 -> uint8 array (H, W, 3)."""
    buf = Path(path).read_bytes()
    try:
        tokens, off = _ppm_tokens(buf, 4)
    except PPMError as exc:
        raise PPMError(f"{path}: {exc}") from None
    if tokens[0] != b"P6":
        raise PPMError(f"{path}: magic {tokens[0]!r} is not P6")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMError(f"{path}: non-integer header field") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise PPMError(f"{path}: unsupported header w={w} h={h} maxval={maxval}")
    raster = buf[off:off + w * h * 3]
    if len(raster) != w * h * 3:
        raise PPMError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write a C x H x W float image in [0, 1] as P6."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    arr = np.transpose(arr, (1, 2, 0))
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


@dataclass
class ImageDirCorpus:
    images: list[np.ndarray]
    names: list[str]
    errors: int = 0

    def __len__(self) -> int:
        return len(self.images)


def load_image_dir(path, h: int, w: int) -> ImageDirCorpus:
    """Decode every ``*.ppm`` under ``path`` (lexicographic order) to C x h x w floats."""
    images, names, errors = [], [], 0
    for f in sorted(Path(path).glob("*.ppm")):
        try:
            arr = read_ppm(f)
        except PPMError as exc:
            log.warning("skipping %s", exc)
            errors += 1
            continue
        img = np.transpose(arr, (2, 0, 1)).astype(np.float64) / 255.0
        if img.shape[1:] != (h, w):
            img = np.clip(resize_bilinear(img, h, w), 0.0, 1.0)
        images.append(img)
        names.append(f.name)
    return ImageDirCorpus(images, names, errors)


class ImageCorpus(SyntheticCorpus):
    """Single-person samples decoded from a PPM directory.

    Multi-person scenes are still procedural: real images carry no foreground
    masks to paste. Each file counts as its own identity.
    """

    def __init__(self, cfg: CorpusConfig, images: ImageDirCorpus | None = None):
        super().__init__(cfg)
        if images is None:
            images = load_image_dir(cfg.image_dir, cfg.image_h, cfg.image_w)
        if not len(images):
            from .tensor import UsageError
            raise UsageError(f"no readable PPM images under {cfg.image_dir!r}")
        self.images = images
        self._scenes = SyntheticCorpus(cfg)

    def __len__(self) -> int:
        return len(self.images)

    def locate(self, index: int) -> tuple[int, int]:
        return int(index), 0

    def person(self, index: int) -> SyntheticPerson:
        img = self.images.images[int(index)]
        return SyntheticPerson(int(index), None, None, img, np.zeros(img.shape[1:], bool))

    def scene(self, key: int) -> MultiPersonScene:
        return self._scenes.scene(key)


def make_corpus(cfg: CorpusConfig) -> SyntheticCorpus:
    return ImageCorpus(cfg) if cfg.image_dir else SyntheticCorpus(cfg)
