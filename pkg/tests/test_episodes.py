import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdsnet.episodes import (IMAGE_MEAN, IMAGE_STD, DatasetError, ImageBank, SyntheticSpec, directory_digest,
                             episode_rng, generate_synthetic, load_dataset, preprocess, read_ppm,
                             resize_bilinear, sample_episode, write_ppm)


def make_layout(root, classes, splits, n=3):
    for c in classes:
        (root / c).mkdir()
        for i in range(n):
            write_ppm(root / c / f"{i}.ppm", np.full((4, 4, 3), i * 10, np.uint8))
    for s, cls in splits.items():
        (root / f"{s}.txt").write_text("\n".join(cls) + "\n")


def test_load_dataset_split_seven_three(tmp_path):
    names = [f"c{i}" for i in range(10)]
    make_layout(tmp_path, names, {"auxiliary": names[:7], "test": names[7:]})
    idx = load_dataset(tmp_path)
    assert len(idx.classes("auxiliary")) == 7 and len(idx.classes("test")) == 3


def test_overlapping_splits(tmp_path):
    make_layout(tmp_path, ["a", "b"], {"auxiliary": ["a", "b"], "test": ["b"]})
    with pytest.raises(DatasetError, match="overlapping label spaces"):
        load_dataset(tmp_path)


def test_empty_class_named(tmp_path):
    make_layout(tmp_path, ["a", "b"], {"auxiliary": ["a"], "test": ["b"]})
    (tmp_path / "empty").mkdir()
    (tmp_path / "test.txt").write_text("b\nempty\n")
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(tmp_path)


def test_missing_class_directory(tmp_path):
    make_layout(tmp_path, ["a"], {"auxiliary": ["a"], "test": ["ghost"]})
    with pytest.raises(DatasetError, match="ghost"):
        load_dataset(tmp_path)


def test_ppm_round_trip_and_comments(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(3, 5, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)
    raw = b"P6\n# comment\n2 1\n255\n" + bytes(range(6))
    assert read_ppm(raw).tolist() == [[[0, 1, 2], [3, 4, 5]]]
    with pytest.raises(DatasetError):
        read_ppm(b"P3\n1 1\n255\n")
    with pytest.raises(DatasetError):
        read_ppm(b"P6\n4 4\n255\n" + bytes(5))


def test_resize_identity_at_target_size():
    img = np.random.default_rng(0).integers(0, 256, size=(84, 84, 3)).astype(np.uint8)
    np.testing.assert_array_equal(resize_bilinear(img, 84), img.astype(np.float64))


def test_checkerboard_corners_match_hand_oracle():
    board = np.zeros((2, 2, 3))
    board[0, 0] = board[1, 1] = 255.0
    out = resize_bilinear(board, 4)
    # half-pixel centres: output 0 -> source -0.25 (clamped to 0), output 1 -> source 0.25
    assert out[0, 0, 0] == pytest.approx(255.0, abs=1e-6)
    assert out[0, 3, 0] == pytest.approx(0.0, abs=1e-6)
    assert out[3, 3, 0] == pytest.approx(255.0, abs=1e-6)
    assert out[1, 1, 0] == pytest.approx(255.0 * (0.75 * 0.75 + 0.25 * 0.25), abs=1e-6)


def test_preprocess_normalisation():
    img = np.zeros((84, 84, 3), np.uint8)
    img[..., 0] = round(0.485 * 255)
    x = preprocess(img)
    assert x.shape == (84, 84, 3) and x.dtype == np.float32
    assert abs(x[..., 0]).max() < 0.01
    np.testing.assert_allclose(x[0, 0, 1], (0 - IMAGE_MEAN[1]) / IMAGE_STD[1], rtol=1e-6)


def test_episode_shapes_and_determinism(small_dataset):
    _, idx = small_dataset
    a = sample_episode(idx, "auxiliary", 5, 1, 3, episode_rng(0, 0, 4))
    b = sample_episode(idx, "auxiliary", 5, 1, 3, episode_rng(0, 0, 4))
    assert len(a.support) == 5 and len(a.query) == 15
    assert a.support == b.support and a.query == b.query
    assert sorted(set(a.query_labels.tolist())) == list(range(5))


def test_episode_disjointness_over_1000_episodes(small_dataset):
    _, idx = small_dataset
    for e in range(1000):
        ep = sample_episode(idx, "auxiliary", 3, 2, 3, episode_rng(1, 0, e))
        assert not set(ep.support) & set(ep.query)
        assert np.bincount(ep.support_labels).tolist() == [2, 2, 2]
        assert np.bincount(ep.query_labels).tolist() == [3, 3, 3]
        for (cls, _), lab in zip(ep.query, ep.query_labels):
            assert ep.classes[lab] == cls


def test_episode_errors(small_dataset):
    _, idx = small_dataset
    with pytest.raises(DatasetError):
        sample_episode(idx, "test", 5, 1, 1, episode_rng(0, 0, 0))
    with pytest.raises(DatasetError):
        sample_episode(idx, "test", 2, 3, 4, episode_rng(0, 0, 0))


def test_synthetic_is_deterministic(tmp_path):
    spec = SyntheticSpec(image_size=12, n_classes=3, n_auxiliary=1, images_per_class=2, seed=5)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
    generate_synthetic(SyntheticSpec(image_size=12, n_classes=3, n_auxiliary=1, images_per_class=2, seed=6),
                       tmp_path / "c")
    assert directory_digest(tmp_path / "a") != directory_digest(tmp_path / "c")


def test_nearest_centroid_separates_classes_without_nuisance(tmp_path):
    spec = SyntheticSpec(image_size=32, n_classes=3, n_auxiliary=1, images_per_class=30, seed=11).without_nuisance()
    idx = generate_synthetic(spec, tmp_path)
    bank = ImageBank(idx, 32)
    a, b = (bank.class_array(c).reshape(30, -1) for c in idx.classes("test"))
    ca, cb = a[:5].mean(0), b[:5].mean(0)
    test = np.concatenate([a[5:], b[5:]])
    labels = np.array([0] * 25 + [1] * 25)
    pred = (np.linalg.norm(test - cb, axis=1) < np.linalg.norm(test - ca, axis=1)).astype(int)
    assert (pred == labels).mean() == 1.0


def test_default_dataset_under_50_mb(default_dataset):
    root, idx = default_dataset
    assert len(idx.classes("auxiliary")) == 20 and len(idx.classes("test")) == 5
    assert sum(p.stat().st_size for p in root.rglob("*") if p.is_file()) < 50 * 2 ** 20


def test_image_bank_cache(small_dataset, tmp_path):
    _, idx = small_dataset
    cls = idx.classes("test")[0]
    first = ImageBank(idx, 16, tmp_path).class_array(cls)
    assert any(tmp_path.iterdir())
    np.testing.assert_array_equal(ImageBank(idx, 16, tmp_path).class_array(cls), first)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(2, 9))
def test_resize_output_shape_and_range(h, w, size):
    img = np.random.default_rng(h * 7 + w).integers(0, 256, size=(h, w, 3)).astype(np.uint8)
    out = resize_bilinear(img, size)
    assert out.shape == (size, size, 3)
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9
