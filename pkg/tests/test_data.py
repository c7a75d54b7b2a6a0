import hashlib
import json

import numpy as np
import pytest

from dpal.data import (
    CorpusConfig,
    PlacementError,
    SyntheticCorpus,
    compose_multi,
    load_image_dir,
    make_views,
    read_ppm,
    render_person,
    write_ppm,
)


def test_render_deterministic():
    a, b = render_person(7, 3), render_person(7, 3)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.fg_mask, b.fg_mask)


def test_pose_changes_geometry_not_appearance():
    a, b = render_person(7, 0), render_person(7, 1)
    assert a.appearance == b.appearance
    assert a.pose != b.pose
    assert not np.array_equal(a.fg_mask, b.fg_mask)


def test_fg_mask_is_body_support():
    p = render_person(11, 2)
    bg = render_person(11, 2).image.copy()
    # background pixels follow the vertical gradient exactly: constant along each row
    rows = np.where(~p.fg_mask.any(axis=1))[0]
    for r in rows:
        assert np.ptp(bg[:, r], axis=1).max() < 1e-12
    assert p.fg_mask.dtype == bool and p.image.shape == (3, 64, 32)
    assert 0.0 <= p.image.min() and p.image.max() <= 1.0


@pytest.mark.slow
def test_fg_area_bounds_over_10k_seeds():
    areas = np.array([render_person(s, s).fg_mask.mean() for s in range(10_000)])
    assert areas.min() >= 0.10 and areas.max() <= 0.60


def test_compose_single_at_origin_is_shifted_mask():
    p = render_person(1, 0)
    scene = compose_multi([p], 64, 64, seed=0, placements=[(0, 0, 1.0)])
    expected = np.zeros((64, 64), np.int64)
    expected[:, :32][p.fg_mask] = 1
    np.testing.assert_array_equal(scene.instance_map, expected)
    np.testing.assert_array_equal(scene.image[:, :, :32][:, p.fg_mask], p.image[:, p.fg_mask])


def test_compose_later_paste_occludes():
    a, b = render_person(1, 0), render_person(2, 0)
    scene = compose_multi([a, b], 64, 64, seed=0, placements=[(0, 0, 1.0), (0, 0, 1.0)])
    assert (scene.instance_map[b.fg_mask.nonzero()] == 2).all()
    only_a = a.fg_mask & ~b.fg_mask
    assert (scene.instance_map[:, :32][only_a] == 1).all()


def test_compose_rejects_bad_counts_and_sizes():
    p = render_person(0, 0)
    with pytest.raises(ValueError):
        compose_multi([], 64, 64, 0)
    with pytest.raises(ValueError):
        compose_multi([p] * 5, 64, 64, 0)
    with pytest.raises(PlacementError):
        compose_multi([p], 16, 16, 0, scale_range=(0.9, 1.0))


def test_scene_labels_consistent_with_image():
    corpus = SyntheticCorpus(CorpusConfig(num_identities=32, seed=3))
    for key in range(8):
        s = corpus.scene(key)
        assert set(np.unique(s.instance_map)) <= set(range(s.count + 1))
        assert 2 <= s.count <= 4 and len(s.identity_ids) == s.count


def test_golden_scene_checksums(fixtures_dir):
    golden = json.loads((fixtures_dir / "scene_checksums.json").read_text())
    corpus = SyntheticCorpus(CorpusConfig(**golden["corpus"]))
    got = [hashlib.sha1(corpus.scene(k).instance_map.astype("<i8").tobytes()).hexdigest() for k in range(64)]
    assert got == golden["sha1"]


def test_corpus_order_reproducible():
    a = SyntheticCorpus(CorpusConfig(num_identities=16, seed=5))
    b = SyntheticCorpus(CorpusConfig(num_identities=16, seed=5))
    assert np.array_equal(a.order(2), b.order(2))
    assert not np.array_equal(a.order(2), a.order(3))
    assert sorted(a.order(0)) == list(range(len(a)))


def test_identity_views():
    p = render_person(4, 1)
    vb = make_views(p, 1, seed=0, crop=False, flip=False, jitter=False)
    assert len(vb.views) == 1 and vb.identity_id == 4
    np.testing.assert_array_equal(vb.views[0], p.image)


def test_views_reproducible_and_distinct():
    p = render_person(4, 1)
    a, b = make_views(p, 3, seed=9), make_views(p, 3, seed=9)
    for x, y in zip(a.views, b.views):
        assert np.array_equal(x, y)
    assert not np.array_equal(a.views[0], a.views[1])
    assert a.canonical is p.image


def test_views_rejects_zero():
    with pytest.raises(ValueError):
        make_views(render_person(0, 0), 0, seed=0)


def test_views_clamped_over_1000_seeds():
    p = render_person(8, 2)
    for seed in range(1000):
        v = make_views(p, 1, seed=seed).views[0]
        assert v.shape == (3, 64, 32)
        assert v.min() >= 0.0 and v.max() <= 1.0


# -- PPM ----------------------------------------------------------------------------


def test_ppm_all_white_2x2(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
    corpus = load_image_dir(tmp_path, 64, 32)
    assert len(corpus) == 1 and corpus.errors == 0
    assert corpus.images[0].shape == (3, 64, 32)
    np.testing.assert_allclose(corpus.images[0], 1.0)


def test_ppm_round_trip_rendered_person(tmp_path):
    p = render_person(21, 0)
    write_ppm(tmp_path / "p.ppm", p.image)
    back = np.transpose(read_ppm(tmp_path / "p.ppm"), (2, 0, 1)) / 255.0
    assert np.abs(back - p.image).max() <= 1 / 255


def test_ppm_header_comments(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6 # comment\n1 1\n# another\n255\n\x00\x80\xff")
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm")[0, 0], [0, 128, 255])


def test_malformed_files_skipped_and_counted(tmp_path, caplog):
    write_ppm(tmp_path / "b_ok.ppm", render_person(0, 0).image)
    (tmp_path / "a_magic.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    (tmp_path / "c_short.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x00")
    (tmp_path / "d_maxval.ppm").write_bytes(b"P6\n1 1\n65535\n" + b"\x00" * 6)
    with caplog.at_level("WARNING"):
        corpus = load_image_dir(tmp_path, 64, 32)
    assert corpus.names == ["b_ok.ppm"] and corpus.errors == 3
    for name in ("a_magic.ppm", "c_short.ppm", "d_maxval.ppm"):
        assert name in caplog.text


def test_lexicographic_order(tmp_path):
    for name in ("b.ppm", "a.ppm", "c.ppm"):
        write_ppm(tmp_path / name, render_person(0, 0).image)
    assert load_image_dir(tmp_path, 64, 32).names == ["a.ppm", "b.ppm", "c.ppm"]


def test_empty_directory(tmp_path):
    corpus = load_image_dir(tmp_path, 64, 32)
    assert len(corpus) == 0 and corpus.errors == 0
