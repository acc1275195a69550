import json

import numpy as np
import pytest

from kprefine.exceptions import InvalidInputError
from kprefine.geometry import essential_from_pose, normalize_point
from kprefine.synthetic import (
    SceneConfig,
    base_descriptor,
    epipolar_px,
    epipolar_px_oracle,
    generate_dataset,
    iter_records,
    load_dataset,
    make_dataset,
    make_record,
    make_texture,
    outlier_flags,
    records_to_dataset,
    render_patch,
    sample_two_view,
    shared_direction,
)


def test_config_validation():
    for kw in (dict(outlier_fraction=1.0), dict(depth_range=(0, 1)), dict(num_points=0), dict(image_size=(8, 8))):
        with pytest.raises(InvalidInputError):
            SceneConfig(**kw)
    cfg = SceneConfig(fixed_translation=(1, 0, 0))
    assert SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_pair_geometry_consistent():
    cfg = SceneConfig(num_points=100)
    g = sample_two_view(cfg, 5)
    assert g.points.shape == (100, 3)
    p1, p2 = g.project()
    w, h = cfg.image_size
    assert np.all(p1 >= 0) and np.all(p1[:, 0] < w) and np.all(p1[:, 1] < h)
    assert np.all(p2 >= 0) and np.all(p2[:, 0] < w) and np.all(p2[:, 1] < h)
    n1, n2 = normalize_point(g.k1, p1), normalize_point(g.k2, p2)
    resid = np.einsum("ni,ij,nj->n", n2, essential_from_pose(g.pose), n1)
    assert np.abs(resid).max() < 1e-12
    assert np.degrees(np.arccos((np.trace(g.pose.rotation) - 1) / 2)) <= cfg.max_rotation + 1e-9
    # depth lies in range along camera-1 optical axis
    assert np.all((g.points[:, 2] >= 10) & (g.points[:, 2] <= 40))


def test_fixed_translation():
    g = sample_two_view(SceneConfig(fixed_translation=(0, 0, 2)), 0)
    np.testing.assert_allclose(g.pose.translation, [0, 0, 1])


@pytest.mark.parametrize("n,frac", [(200, 0.1), (7, 0.3), (1000, 0.25), (10, 0.0), (3, 0.5)])
def test_outlier_flags_exact(n, frac):
    flags = outlier_flags(n, frac)
    assert flags.sum() == int(np.floor(n * frac + 1e-12))
    # every prefix is within one of its share: interleaved, not clustered
    prefix = np.cumsum(flags)
    assert np.all(np.abs(prefix - np.arange(1, n + 1) * frac) < 1)


def test_outlier_flags_decimal_exact():
    # 0.1 in binary is slightly above 1/10; the count must still be exactly 10
    assert outlier_flags(100, 0.1).sum() == 10
    assert outlier_flags(30, 0.1).sum() == 3


def test_render_dominant_blob_at_true_center():
    cfg = SceneConfig(photometric_noise=0.0, affine_jitter=0.0)
    tex = make_texture(cfg, 0, 0)
    true = np.array([100.3, 50.6])
    img, score = render_patch(cfg, tex, true, (100, 51), 1, np.random.default_rng(0))
    assert img.shape == score.shape == (11, 11)
    np.testing.assert_allclose(tex(np.zeros(2)), 1.0 + np.sum(tex.amplitudes[1:] * np.exp(
        -np.sum(tex.centers[1:] ** 2, axis=1) / (2 * tex.sigmas[1:] ** 2))))
    # score patch: 1 at the nearest pixel, less elsewhere
    assert score[5, 5] == pytest.approx(1.0)
    assert score.max() == score[5, 5]
    assert np.all(img >= 0) and np.all(img <= 1)


def test_render_noise_and_clamp():
    cfg = SceneConfig(photometric_noise=0.5)
    img, _ = render_patch(cfg, make_texture(cfg, 0, 0), [50.0, 50.0], (50, 50), 2, np.random.default_rng(1))
    assert img.min() >= 0 and img.max() <= 1


def test_descriptor_positive_negative_gap():
    # Monte Carlo: matched descriptors far more similar than random non-matches
    cfg = SceneConfig()
    shared = shared_direction(cfg)
    rng = np.random.default_rng(0)
    pos, neg = [], []
    for p in range(200):
        b = base_descriptor(cfg, 0, p, shared)
        o = base_descriptor(cfg, 1, p, shared)
        d1 = b + rng.normal(0, cfg.descriptor_noise / np.sqrt(cfg.descriptor_dim), cfg.descriptor_dim)
        d2 = b + rng.normal(0, cfg.descriptor_noise / np.sqrt(cfg.descriptor_dim), cfg.descriptor_dim)
        d1 /= np.linalg.norm(d1)
        d2 /= np.linalg.norm(d2)
        pos.append(d1 @ d2)
        neg.append(d1 @ o)
    assert np.mean(pos) - np.mean(neg) > 0.5
    assert np.mean(pos) > 0.95


def test_records_deterministic_and_restartable(small_scene):
    a = list(iter_records(small_scene, 90))
    b = list(iter_records(small_scene, 50, start=40))
    assert json.dumps(a[40:]) == json.dumps(b)
    assert make_record(small_scene, 70, a[70]["is_outlier"]) == a[70]


def test_generate_file_hash_stable(tmp_path, small_scene):
    h1 = generate_dataset(small_scene, 60, tmp_path / "a.jsonl")
    h2 = generate_dataset(small_scene, 60, tmp_path / "b.jsonl")
    assert h1 == h2
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    other = generate_dataset(SceneConfig(seed=4, num_points=40, descriptor_dim=8), 60, tmp_path / "c.jsonl")
    assert other != h1


def test_record_fields(small_scene):
    rec = next(iter(iter_records(small_scene, 1)))
    for k in ("sample_id", "patch1", "patch2", "score1", "score2", "d1", "d2", "true1", "true2",
              "quantized1", "quantized2", "fx1", "fy1", "cx1", "cy1", "fx2", "fy2", "cx2", "cy2",
              "E", "R", "t", "is_outlier"):
        assert k in rec
    assert len(rec["d1"]) == 8 and len(rec["E"]) == 9


def test_loaded_matches_in_memory(tmp_path, small_scene, small_dataset):
    generate_dataset(small_scene, 160, tmp_path / "d.jsonl")
    ds = load_dataset(tmp_path / "d.jsonl")
    for name in ds.__dataclass_fields__:
        np.testing.assert_array_equal(getattr(ds, name), getattr(small_dataset, name))


def test_dataset_contents(small_dataset, small_scene):
    ds = small_dataset
    assert len(ds) == 160 and ds.descriptor_dim == 8
    assert ds.is_outlier.sum() == 40
    np.testing.assert_array_equal(ds.quantized1, np.round(ds.quantized1))
    assert np.all(np.abs(ds.quantized1 - ds.true1) <= 0.5 + 1e-12)
    np.testing.assert_allclose(np.linalg.norm(ds.d1, axis=1), 1.0, atol=1e-12)
    assert list(ds.pair_indices()) == [0, 1, 2, 3]
    # true inlier locations satisfy the epipolar constraint, outliers do not
    err = epipolar_px(ds, ds.true1, ds.true2)
    assert err[~ds.is_outlier].max() < 1e-6
    assert np.median(err[ds.is_outlier]) > 5.0
    # rounding to the grid costs a fraction of a pixel
    q = epipolar_px(ds, ds.quantized1, ds.quantized2)[~ds.is_outlier]
    assert 0.05 < np.median(q) < 0.6


def test_epipolar_px_matches_oracle(small_dataset, rng):
    p1 = small_dataset.quantized1 + rng.normal(size=(160, 2))
    p2 = small_dataset.quantized2 + rng.normal(size=(160, 2))
    np.testing.assert_allclose(epipolar_px(small_dataset, p1, p2), epipolar_px_oracle(small_dataset, p1, p2), rtol=1e-10)


def test_border_matches_are_skipped():
    cfg = SceneConfig(seed=0, num_points=200, descriptor_dim=4)
    ds = make_dataset(cfg, 400)
    near = np.minimum.reduce([ds.quantized1[:, 0], ds.quantized1[:, 1],
                              639 - ds.quantized1[:, 0], 479 - ds.quantized1[:, 1]]) < 5
    near |= np.minimum.reduce([ds.quantized2[:, 0], ds.quantized2[:, 1],
                               639 - ds.quantized2[:, 0], 479 - ds.quantized2[:, 1]]) < 5
    np.testing.assert_array_equal(ds.skipped, near)
    assert near.any()
    assert not ds.patch1[ds.skipped & ~near].any()


def test_records_to_dataset_validation(small_scene):
    rec = next(iter(iter_records(small_scene, 1)))
    with pytest.raises(InvalidInputError):
        records_to_dataset([])
    bad = dict(rec)
    del bad["E"]
    with pytest.raises(InvalidInputError):
        records_to_dataset([bad])
    bad = dict(rec, patch1=rec["patch1"][:-1])
    with pytest.raises(InvalidInputError):
        records_to_dataset([bad])
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/file.jsonl")


def test_subset(small_dataset):
    sub = small_dataset.subset(np.arange(10, 20))
    assert len(sub) == 10 and sub.sample_id[0] == 10


def test_constrained_pose_is_identity():
    g = sample_two_view(SceneConfig(max_rotation=0, fixed_translation=(1, 0, 0)), 3)
    np.testing.assert_allclose(g.pose.rotation, np.eye(3), atol=1e-15)
    X2 = g.points @ g.pose.rotation.T + g.pose.translation
    assert np.all(g.points[:, 2] > 0) and np.all(X2[:, 2] > 0)


def test_sample_is_reproducible():
    cfg = SceneConfig()
    a, b = sample_two_view(cfg, 9), sample_two_view(cfg, 9)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.pose.rotation.tobytes() == b.pose.rotation.tobytes()


def test_noiseless_views_identical_and_centered():
    cfg = SceneConfig(photometric_noise=0.0, affine_jitter=0.0)
    tex = make_texture(cfg, 2, 7)
    a, _ = render_patch(cfg, tex, (40.0, 30.0), (40, 30), 1, np.random.default_rng(0))
    b, _ = render_patch(cfg, tex, (40.0, 30.0), (40, 30), 2, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    assert np.unravel_index(np.argmax(a), a.shape) == (5, 5)


def test_zero_descriptor_noise():
    ds = make_dataset(SceneConfig(num_points=20, descriptor_dim=4, descriptor_noise=0.0, outlier_fraction=0.0), 20)
    np.testing.assert_array_equal(ds.d1, ds.d2)


def test_half_outliers():
    assert outlier_flags(1000, 0.5).sum() == 500
