import numpy as np
import pytest

from dpal import dptn
from dpal.data import render_person
from dpal.probes import patch_foreground
from dpal.teacher import (
    Teacher,
    attention_relation,
    make_synthetic_teacher,
    resolve_teacher,
    saliency_mask,
    similarity_relation,
)
from dpal.vit import MICRO_TEACHER, ViTConfig, ViTEncoder


def random_teacher(seed=0, cfg=MICRO_TEACHER, **kw):
    return Teacher(ViTEncoder(cfg, np.random.default_rng(seed), np.float64), **kw)


def images(n=2, seed=0):
    return np.stack([render_person(seed + i, i).image for i in range(n)])


def test_saliency_mask_examples():
    np.testing.assert_array_equal(saliency_mask(np.array([0.9, 0.1, 0.1, 0.1])), [1, 0, 0, 0])
    np.testing.assert_array_equal(saliency_mask(np.full(5, 0.2)), np.ones(5))


def test_uniform_attention_gives_full_mask():
    t = random_teacher()
    blk = t.encoder.blocks[-1]
    blk.attn.qkv.weight.data[:, :96] = 0  # zero queries and keys -> uniform attention
    blk.attn.qkv.bias.data[:96] = 0
    np.testing.assert_array_equal(t.shape_mask(images()), np.ones((2, 32)))


def test_mask_never_empty():
    t = random_teacher(1)
    m = t.shape_mask(np.random.default_rng(0).random((8, 3, 64, 32)))
    assert (m.sum(axis=1) >= 1).all()


def test_global_target_deterministic_and_sized():
    t = random_teacher()
    a, b = t.global_target(images()), t.global_target(images())
    assert a.shape == (2, 48)
    assert np.array_equal(a, b)


def test_local_target_mask_rules():
    t = random_teacher()
    tok = t.encode(images())
    zeros = t.local_target(mask=np.zeros((2, 32)), tokens=tok)
    assert not zeros.any()
    ones = t.local_target(mask=np.ones((2, 32)), tokens=tok)
    np.testing.assert_array_equal(ones, tok.tokens.data[:, 1:])
    targets = t.targets(images())
    zero_rows = np.abs(targets.local_target).sum(-1) == 0
    np.testing.assert_array_equal(zero_rows, targets.shape_mask == 0)


def test_relation_single_head_is_renormalised_block():
    cfg = ViTConfig(patch_size=8, embed_dim=48, num_heads=1, depth=2, image_h=64, image_w=32)
    t = random_teacher(2, cfg)
    scene = np.random.default_rng(0).random((1, 3, 64, 64))
    att = t.encode(scene).last_attention.data[0, 0]
    block = att[1:, 1:]
    np.testing.assert_allclose(t.relation_target(scene)[0], block / block.sum(1, keepdims=True), atol=1e-15)


def test_relation_rows_sum_to_one():
    t = random_teacher(3)
    rel = t.relation_target(np.random.default_rng(1).random((3, 3, 64, 64)))
    assert rel.shape == (3, 64, 64)
    assert np.abs(rel.sum(-1) - 1).max() < 1e-6


def test_similarity_relation_flag():
    t = random_teacher(4, relation_mode="sim")
    scene = np.random.default_rng(2).random((1, 3, 64, 64))
    tok = t.encode(scene).tokens.data[:, 1:]
    np.testing.assert_allclose(t.relation_target(scene), similarity_relation(tok))
    with pytest.raises(ValueError):
        random_teacher(relation_mode="bogus")


def test_attention_relation_drops_class_token():
    a = np.random.default_rng(0).random((1, 2, 5, 5))
    a /= a.sum(-1, keepdims=True)
    rel = attention_relation(a)
    assert rel.shape == (1, 4, 4)


def test_teacher_is_frozen():
    t = random_teacher()
    assert all(not p.requires_grad for p in t.parameters())
    t.encode(images())
    assert all(p.grad is None for p in t.parameters())


def test_synthetic_teacher_deterministic_and_saved(tmp_path):
    a = make_synthetic_teacher(5, warm_steps=2, batch_size=2)
    b = make_synthetic_teacher(5, warm_steps=2, batch_size=2)
    for (n, p), (_, q) in zip(a.encoder.named_parameters(), b.encoder.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    a.save(tmp_path / "t")
    state, manifest = dptn.load_state(tmp_path / "t")
    assert sum(v.size for v in state.values()) == a.encoder.num_parameters()
    assert manifest["vit"]["embed_dim"] == 48
    loaded = Teacher.load(tmp_path / "t")
    np.testing.assert_array_equal(loaded.global_target(images()), a.global_target(images()))


def test_micro_teacher_weight_count():
    d, L, depth = 48, 32, 4
    per_block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    expected = (192 * d + d) + d + (L + 1) * d + depth * per_block
    assert random_teacher().encoder.num_parameters() == expected


def test_resolve_teacher_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        resolve_teacher(str(tmp_path / "missing"))


def test_warm_teacher_attends_to_foreground(micro_teacher):
    persons = [render_person(50_000 + i, i % 4) for i in range(64)]
    sal = micro_teacher.encode(np.stack([p.image for p in persons])).last_attention.data.mean(1)[:, 0, 1:]
    fg = np.stack([patch_foreground(p.fg_mask, 8) for p in persons])
    assert sal[fg].mean() > sal[~fg].mean()


def test_targets_match_frozen_f64_fixture(fixtures_dir):
    state, _ = dptn.load_state(fixtures_dir / "teacher_f64")
    enc = ViTEncoder(MICRO_TEACHER, np.random.default_rng(123), np.float64)
    enc.load_state_dict(dptn.strip_prefix(state, "param"))
    tg = Teacher(enc).targets(state["single"], state["multi"])
    for name in ("global_target", "shape_mask", "local_target", "relation_target"):
        np.testing.assert_allclose(getattr(tg, name), state[name], atol=1e-12, rtol=0, err_msg=name)
