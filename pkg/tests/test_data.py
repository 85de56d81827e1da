import collections

import numpy as np
import pytest

from anml import data
from anml.data import (
    DatasetError,
    fetch_omniglot,
    load_omniglot,
    load_raw_fixture,
    make_iid_stream,
    make_metatest_trajectory,
    make_metatrain_trajectory,
    make_synthetic_store,
    sample_remember_set,
    split_classes,
    write_raw_fixture,
)
from fixtures import write_png_tree, zip_tree


def linear_probe_accuracy(store, train_per_class=15, ridge=0.1):
    """Ridge-regression one-vs-rest probe on raw pixels; held-out instances scored."""
    n = store.images.shape[0]
    x = store.images.reshape(n, store.n_instances, -1)
    tr, te = x[:, :train_per_class].reshape(-1, x.shape[-1]), x[:, train_per_class:].reshape(-1, x.shape[-1])
    ytr = np.repeat(np.arange(n), train_per_class)
    yte = np.repeat(np.arange(n), store.n_instances - train_per_class)
    a = np.c_[tr, np.ones(len(tr))]
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ np.eye(n)[ytr])
    return float((np.argmax(np.c_[te, np.ones(len(te))] @ w, axis=1) == yte).mean())


@pytest.fixture(scope="module")
def png_root(tmp_path_factory):
    return write_png_tree(tmp_path_factory.mktemp("omni") / "images_background", 10, seed=3)


def test_synthetic_store_contract():
    s = make_synthetic_store(60, 20, 14, 5)
    assert s.images.shape == (60, 20, 14, 14)
    assert s.images.dtype == np.float32
    assert 0.0 <= s.images.min() and s.images.max() <= 1.0
    assert s.images.max() > 0.9
    t = make_synthetic_store(60, 20, 14, 5)
    assert s.images.tobytes() == t.images.tobytes()
    assert make_synthetic_store(60, 20, 14, 6).images.tobytes() != s.images.tobytes()
    with pytest.raises(DatasetError):
        make_synthetic_store(0, 20, 14, 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synthetic_classes_linearly_separable(seed):
    assert linear_probe_accuracy(make_synthetic_store(60, 20, 14, seed)) >= 0.95


def test_split_matches_permutation_oracle():
    train, test = split_classes(10, 3, seed=4)
    perm = np.random.default_rng(4).permutation(10)
    assert sorted(test.tolist()) == sorted(perm[:3].tolist())
    assert sorted(train.tolist()) == sorted(perm[3:].tolist())
    assert len(train) == 7 and not set(train) & set(test)
    with pytest.raises(DatasetError):
        split_classes(5, 6, 0)


def test_load_png_tree(png_root):
    s = load_omniglot(png_root.parent, seed=2, image_size=14, expected_classes=10, n_meta_test=3)
    assert len(s.meta_train) == 7 and len(s.meta_test) == 3
    perm = np.random.default_rng(2).permutation(10)
    assert sorted(s.meta_test.tolist()) == sorted(perm[:3].tolist())
    assert s.images.shape == (10, 20, 14, 14)
    assert 0.0 <= s.images.min() and s.images.max() <= 1.0
    # fixtures draw about 30% dark pixels; ink is inverted to 1
    assert 0.2 < s.images.mean() < 0.4
    assert s.class_names[0] == "images_background/Alphabet_00/character01"
    again = load_omniglot(png_root.parent, seed=2, image_size=14, expected_classes=10, n_meta_test=3)
    assert again.images.tobytes() == s.images.tobytes()
    assert (again.meta_test == s.meta_test).all()


def test_decode_inverts_and_resizes(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((8, 8), 255, np.uint8)).save(tmp_path / "white.png")
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "black.png")
    assert (data._decode(tmp_path / "white.png", 14) == 0.0).all()
    np.testing.assert_allclose(data._decode(tmp_path / "black.png", 14), 1.0, atol=1e-6)
    assert data._decode(tmp_path / "black.png", 14).shape == (14, 14)


def test_load_rejects_wrong_class_count(png_root):
    with pytest.raises(DatasetError, match="found 10 character classes, expected 1623"):
        load_omniglot(png_root.parent, 0)


def test_load_lists_corrupt_files(tmp_path):
    root = write_png_tree(tmp_path / "bg", 3)
    bad = sorted((root / "Alphabet_00" / "character02").glob("*.png"))[4]
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="character02"):
        load_omniglot(tmp_path, 0, expected_classes=3, n_meta_test=1)
    with pytest.raises(DatasetError, match="does not exist"):
        load_omniglot(tmp_path / "missing", 0)


def test_raw_fixture_round_trip(tmp_path):
    s = make_synthetic_store(5, 4, 14, 1)
    write_raw_fixture(s, tmp_path / "fx")
    assert (tmp_path / "fx" / "manifest.txt").read_text().startswith("fixture 1 classes=5")
    back = load_raw_fixture(tmp_path / "fx", seed=0, n_meta_test=2)
    assert np.abs(back.images - s.images).max() <= 0.5 / 255 + 1e-7
    assert back.class_names == s.class_names
    assert len(back.meta_test) == 2


def test_remember_set():
    s = make_synthetic_store(8, 20, 14, 0, n_meta_test=3)
    x, y = sample_remember_set(s, 64, 0)
    assert x.shape == (64, 14, 14) and y.shape == (64,)
    assert y.max() < len(s.meta_train)
    x0, y0 = sample_remember_set(s, 0, 0)
    assert len(x0) == 0 and len(y0) == 0
    with pytest.raises(DatasetError):
        sample_remember_set(s, 101, 0)


def test_remember_set_exhaustive_is_full_multiset():
    s = make_synthetic_store(5, 20, 14, 0)
    x, y = sample_remember_set(s, 100, 9)
    assert collections.Counter(y.tolist()) == {c: 20 for c in range(5)}
    rows = {r.tobytes() for r in x}
    assert rows == {s.images[c, i].tobytes() for c in range(5) for i in range(20)}


def test_remember_set_never_contains_meta_test_images(small_store):
    test_images = {small_store.images[c, i].tobytes() for c in small_store.meta_test for i in range(20)}
    for seed in range(5):
        x, _ = sample_remember_set(small_store, 64, seed)
        assert not test_images & {r.tobytes() for r in x}


def test_metatrain_trajectory(small_store):
    t = make_metatrain_trajectory(small_store, 3)
    assert len(t) == 20 and set(t.labels) == {3} and t.class_order == [int(small_store.meta_train[3])]
    assert t.phase == "meta_train"
    with pytest.raises(DatasetError):
        make_metatrain_trajectory(small_store, len(small_store.meta_train))


def test_metatest_trajectory(small_store):
    t = make_metatest_trajectory(small_store, 4, 0)
    assert len(t) == 60
    np.testing.assert_array_equal(t.labels, np.repeat(np.arange(4), 15))
    assert set(t.class_order) <= set(small_store.meta_test.tolist())
    assert t.test_images.shape == (20, 14, 14)
    np.testing.assert_array_equal(t.test_labels, np.repeat(np.arange(4), 5))
    first = t.class_order[0]
    np.testing.assert_array_equal(t.images[:15], small_store.images[first, :15])
    np.testing.assert_array_equal(t.test_images[:5], small_store.images[first, 15:])
    assert len(make_metatest_trajectory(small_store, 1, 0)) == 15
    with pytest.raises(DatasetError):
        make_metatest_trajectory(small_store, 9, 0)


def test_metatest_trajectory_orders_differ_across_seeds(small_store):
    orders = {tuple(make_metatest_trajectory(small_store, 8, s).class_order) for s in range(6)}
    assert len(orders) > 1
    for o in orders:
        assert sorted(o) == sorted(small_store.meta_test.tolist())


def test_updates_since_last_seen(small_store):
    t = make_metatest_trajectory(small_store, 3, 0)
    assert t.updates_since_last_seen(0) == 30
    assert t.updates_since_last_seen(2) == 0


def test_iid_stream(small_store):
    t = make_metatest_trajectory(small_store, 3, 0)
    one = make_iid_stream(t, 1, 0)
    assert sorted(one.labels.tolist()) == sorted(t.labels.tolist())
    assert not (one.labels == t.labels).all()
    assert {r.tobytes() for r in one.images} == {r.tobytes() for r in t.images}
    twenty = make_iid_stream(t, 20, 0)
    assert len(twenty) == 20 * len(t)
    for e in range(20):
        chunk = twenty.labels[e * 45 : (e + 1) * 45]
        assert collections.Counter(chunk.tolist()) == collections.Counter(t.labels.tolist())
    single = make_metatest_trajectory(small_store, 1, 0)
    single = data.TaskTrajectory(single.images[:1], single.labels[:1], single.class_order, "meta_test")
    same = make_iid_stream(single, 1, 5)
    assert same.images.tobytes() == single.images.tobytes()
    with pytest.raises(DatasetError):
        make_iid_stream(t, 0, 0)


def test_fetch_from_archive(tmp_path):
    src = write_png_tree(tmp_path / "src" / "images_background", 6)
    archive = zip_tree(src, tmp_path / "bg.zip")
    root = tmp_path / "data"
    with pytest.raises(DatasetError, match="offline"):
        fetch_omniglot(root, offline=True, expected_classes=6)
    assert fetch_omniglot(root, (archive.as_uri(),), expected_classes=6) == "downloaded"
    assert fetch_omniglot(root, ("file:///nonexistent.zip",), expected_classes=6) == "already present"
    assert fetch_omniglot(root, offline=True, expected_classes=6) == "already present"
    with pytest.raises(DatasetError, match="failed to fetch"):
        fetch_omniglot(tmp_path / "other", ("file:///nonexistent.zip",), expected_classes=6)


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(data.DATA_ROOT_ENV, str(tmp_path))
    assert data.default_data_root() == tmp_path
