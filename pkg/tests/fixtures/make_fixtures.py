"""Regenerate the frozen fixtures in this directory.

Run from the repository root: ``python3 tests/fixtures/make_fixtures.py``.
Only rerun after an intentional change to rendering, compositing or the
encoder; the tests compare against whatever this script last wrote.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from dpal import dptn
from dpal.data import CorpusConfig, SyntheticCorpus, render_person
from dpal.teacher import Teacher
from dpal.vit import MICRO_STUDENT, MICRO_TEACHER, ViTEncoder

HERE = Path(__file__).parent
SCENE_CORPUS = {"num_identities": 256, "poses_per_identity": 4, "seed": 1234}


def scene_checksums() -> dict:
    corpus = SyntheticCorpus(CorpusConfig(**SCENE_CORPUS))
    sha = [hashlib.sha1(corpus.scene(k).instance_map.astype("<i8").tobytes()).hexdigest() for k in range(64)]
    return {"corpus": SCENE_CORPUS, "sha1": sha}


def encoder_golden() -> dict[str, np.ndarray]:
    images = np.stack([render_person(i, i).image for i in range(2)])
    enc = ViTEncoder(MICRO_STUDENT, np.random.default_rng(0), np.float64)
    out = enc(images)
    state = {f"param/{k}": v for k, v in enc.state_dict().items()}
    state.update(images=images, tokens=out.tokens.data, last_attention=out.last_attention.data)
    return state


def teacher_golden() -> dict[str, np.ndarray]:
    rng = np.random.default_rng(1)
    teacher = Teacher(ViTEncoder(MICRO_TEACHER, rng, np.float64))
    single = np.stack([render_person(10 + i, 0).image for i in range(2)])
    multi = SyntheticCorpus(CorpusConfig(num_identities=16, seed=1)).scene(0).image[None]
    tg = teacher.targets(single, multi)
    state = {f"param/{k}": v for k, v in teacher.encoder.state_dict().items()}
    state.update(single=single, multi=multi, global_target=tg.global_target,
                 shape_mask=tg.shape_mask.astype(np.float64), local_target=tg.local_target,
                 relation_target=tg.relation_target)
    return state


def main() -> None:
    (HERE / "scene_checksums.json").write_text(json.dumps(scene_checksums(), indent=1) + "\n")
    dptn.save_state(HERE / "encoder_f64", encoder_golden())
    dptn.save_state(HERE / "teacher_f64", teacher_golden())


if __name__ == "__main__":
    main()
