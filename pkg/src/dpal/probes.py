"""Frozen-feature probes on synthetic ground truth.

retrieval: identity R@1 from decoded global tokens (cosine nearest neighbour)
mask:      Otsu on decoded patch-row norms vs. the rendered foreground
relation:  mutual top-k graph on the relation map, components vs. instances (ARI)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.metrics import adjusted_rand_score

from . import tensor as T
from .data import CorpusConfig, SyntheticCorpus, derive_seed, patch_labels, render_person
from .dpade import PatternDecoder, relation_map
from .vit import ViTEncoder

PROBE_IDENTITY_OFFSET = 1_000_000
POSE_A, POSE_B = 0, 1


@dataclass
class ProbeReport:
    retrieval_r1: float
    mask_iou: float
    relation_ari: float
    fingerprint: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- metric cores (pure numpy, model-free) -------------------------------------


def recall_at_1(queries: np.ndarray, gallery: np.ndarray, q_ids, g_ids) -> float:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    top = np.argmax(q @ g.T, axis=1)
    return float(np.mean(np.asarray(g_ids)[top] == np.asarray(q_ids)))


def patch_foreground(fg_mask: np.ndarray, patch: int) -> np.ndarray:
    """Patch is foreground when more than half of its pixels are."""
    h, w = fg_mask.shape
    cover = fg_mask.astype(np.float64).reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))
    return (cover > 0.5).reshape(-1)


def otsu_threshold(values: np.ndarray) -> float:
    """Exact Otsu split over the sorted values (no histogram binning).

    Maximises the between-class variance w0*w1*(mu0 - mu1)^2 over every cut
    between distinct neighbours; returns the midpoint of the best cut.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.size
    csum = np.cumsum(x)
    i = np.arange(1, n)  # cut after the first i values
    mu0 = csum[:-1] / i
    mu1 = (csum[-1] - csum[:-1]) / (n - i)
    between = (i / n) * ((n - i) / n) * (mu0 - mu1) ** 2
    between[x[1:] == x[:-1]] = -1.0  # no cut between equal values
    k = int(np.argmax(between))
    return float(0.5 * (x[k] + x[k + 1]))


def otsu_mask(row_norms: np.ndarray) -> np.ndarray:
    x = np.asarray(row_norms, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0:
        return np.zeros_like(x, dtype=bool)
    return x > otsu_threshold(x)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def expected_cluster_fraction(labels: np.ndarray) -> float:
    """Expected size, as a fraction of L, of the cluster holding a random patch."""
    _, counts = np.unique(labels, return_counts=True)
    return float(((counts / counts.sum()) ** 2).sum())


def cluster_relation(rel: np.ndarray, q: float) -> np.ndarray:
    """Keep, per row, entries at or above the row's ceil(q*L)-th largest value;
    mutual edges form an undirected graph whose components are the clusters."""
    rel = np.asarray(rel, dtype=np.float64)
    n = rel.shape[0]
    k = min(max(int(math.ceil(q * n - 1e-9)), 1), n)
    kth = np.sort(rel, axis=1)[:, n - k][:, None]
    keep = (rel >= kth) & (rel > 0)
    adj = keep & keep.T
    _, labels = connected_components(csr_matrix(adj), directed=False)
    return labels


def relation_ari(rel: np.ndarray, gt_labels: np.ndarray) -> float:
    pred = cluster_relation(rel, expected_cluster_fraction(gt_labels))
    with warnings.catch_warnings():
        # sklearn flags many-cluster label vectors as "regression-like"; irrelevant here
        warnings.simplefilter("ignore", UserWarning)
        return float(adjusted_rand_score(gt_labels, pred))


# -- model-facing probes --------------------------------------------------------


def _decode(student: ViTEncoder, decoder: PatternDecoder, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            out.append(decoder.decode(student(images[i:i + chunk]).tokens).data.astype(np.float64))
    return np.concatenate(out)


def probe_persons(num_identities: int = 256, h: int = 64, w: int = 32, offset: int = PROBE_IDENTITY_OFFSET):
    """Pose-A and pose-B renders of held-out identities."""
    ids = [offset + i for i in range(num_identities)]
    a = [render_person(i, POSE_A, h, w) for i in ids]
    b = [render_person(i, POSE_B, h, w) for i in ids]
    return ids, a, b


def probe_retrieval(student, decoder, num_identities: int = 256, persons=None) -> float:
    ids, a, b = persons or probe_persons(num_identities, student.cfg.image_h, student.cfg.image_w)
    qa = _decode(student, decoder, np.stack([p.image for p in a]))[:, 0]
    gb = _decode(student, decoder, np.stack([p.image for p in b]))[:, 0]
    return recall_at_1(qa, gb, ids, ids)


def probe_mask(student, decoder, num_identities: int = 256, persons=None) -> float:
    _, a, _ = persons or probe_persons(num_identities, student.cfg.image_h, student.cfg.image_w)
    patches = _decode(student, decoder, np.stack([p.image for p in a]))[:, 1:]
    norms = np.linalg.norm(patches, axis=-1)
    p = student.cfg.patch_size
    scores = [iou(otsu_mask(n), patch_foreground(person.fg_mask, p)) for n, person in zip(norms, a)]
    return float(np.mean(scores))


def probe_scenes(num_scenes: int = 64, seed: int = 0, h: int = 64, w: int = 32):
    corpus = SyntheticCorpus(CorpusConfig(num_identities=256, poses_per_identity=2, image_h=h, image_w=w,
                                          identity_offset=PROBE_IDENTITY_OFFSET, seed=derive_seed(seed, 0xA1)))
    return [corpus.scene(k) for k in range(num_scenes)]


def probe_relation(student, decoder, num_scenes: int = 64, seed: int = 0, scenes=None) -> float:
    scenes = scenes or probe_scenes(num_scenes, seed, student.cfg.image_h, student.cfg.image_w)
    p = student.cfg.patch_size
    scores = []
    with T.no_grad():
        for i in range(0, len(scenes), 32):
            chunk = scenes[i:i + 32]
            dec = decoder.decode(student(np.stack([s.image for s in chunk])).tokens)
            rel = relation_map(dec[:, 1:], decoder.temperature_dim).data
            for r, s in zip(rel, chunk):
                scores.append(relation_ari(r, patch_labels(s.instance_map, p)))
    return float(np.mean(scores))


def run_probes(student, decoder, seed: int = 0, num_identities: int = 256, num_scenes: int = 64,
               fingerprint: str = "") -> ProbeReport:
    persons = probe_persons(num_identities, student.cfg.image_h, student.cfg.image_w)
    return ProbeReport(
        retrieval_r1=probe_retrieval(student, decoder, persons=persons),
        mask_iou=probe_mask(student, decoder, persons=persons),
        relation_ari=probe_relation(student, decoder, num_scenes, seed),
        fingerprint=fingerprint,
        seed=seed,
    )
