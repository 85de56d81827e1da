import math

import numpy as np
import pytest

from anml.analysis import (
    ActivationDump,
    analyze,
    capture_activations,
    export_activations,
    knn_classify,
    random_nm_model,
    read_activations,
    sparsity_stats,
    write_stats,
)


def brute_force_knn(train, labels, query, k):
    """All-pairs distances, ranked by (distance, index); votes by (count, -summed distance, -label)."""
    out = []
    for q in query:
        ranked = sorted((math.dist(q, p), i) for i, p in enumerate(train))[:k]
        count, total = {}, {}
        for d, i in ranked:
            lab = int(labels[i])
            count[lab] = count.get(lab, 0) + 1
            total[lab] = total.get(lab, 0.0) + d
        best = None
        for lab in sorted(count):
            key = (count[lab], -total[lab])
            if best is None or key > best[0]:
                best = (key, lab)
        out.append(best[1])
    return np.array(out)


def _dump(vectors, kinds=("pre", "gate", "post")):
    vectors = np.asarray(vectors, dtype=np.float32)
    n = len(vectors)
    return ActivationDump(np.arange(n), np.zeros(n, dtype=np.int64), {k: vectors for k in kinds})


def test_sparsity_hand_fixture():
    s = sparsity_stats(_dump([[1, 0, 0.02, 0], [0, 1, 0, 0]], ("post",)), 0.01)["post"]
    assert s["mean_active_fraction"] == pytest.approx(0.375)
    assert s["dead_neurons"] == 1 and s["dead_fraction"] == 0.25


def test_sparsity_all_zero_and_threshold_is_strict():
    s = sparsity_stats(_dump(np.zeros((3, 5)), ("gate",)))["gate"]
    assert s["mean_active_fraction"] == 0.0 and s["dead_neurons"] == 5
    exact = sparsity_stats(_dump([[0.01, 0.011]], ("gate",)))["gate"]
    assert exact["mean_active_fraction"] == 0.5


def test_sparsity_errors():
    with pytest.raises(ValueError, match="empty"):
        sparsity_stats(_dump(np.zeros((0, 4))))
    with pytest.raises(ValueError):
        sparsity_stats(_dump(np.zeros((1, 4))), 0.0)


def test_sparsity_order_invariant():
    rng = np.random.default_rng(0)
    d = _dump(np.maximum(rng.normal(size=(30, 8)), 0))
    perm = rng.permutation(30)
    assert sparsity_stats(d) == sparsity_stats(d.select(perm))


def test_knn_two_d_fixture():
    train = np.array([[0, 0], [0, 1], [5, 5], [5, 6], [5, 4]], dtype=float)
    labels = np.array([0, 0, 1, 1, 1])  # A=0, B=1
    assert knn_classify(train, labels, [[4, 5]], k=3).tolist() == [1]
    assert knn_classify(train, labels, [[0, 1]], k=1).tolist() == [0]


def test_knn_tie_breaks():
    # one A at distance 1, one B at distance 2: count tie, A has smaller summed distance
    assert knn_classify([[1.0], [-2.0]], [7, 3], [[0.0]], k=2).tolist() == [7]
    # equal sums too: smaller label wins
    assert knn_classify([[1.0], [-1.0]], [7, 3], [[0.0]], k=2).tolist() == [3]


@pytest.mark.parametrize("seed", range(50))
def test_knn_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 150))
    dim = int(rng.integers(1, 6))
    # integer grids make exact distance ties common
    train = rng.integers(-3, 4, size=(n, dim)).astype(float)
    labels = rng.integers(0, 4, size=n)
    query = rng.integers(-3, 4, size=(int(rng.integers(1, 50)), dim)).astype(float)
    k = int(rng.integers(1, min(n, 9) + 1))
    np.testing.assert_array_equal(knn_classify(train, labels, query, k), brute_force_knn(train, labels, query, k))


def test_knn_errors():
    with pytest.raises(ValueError, match="empty"):
        knn_classify(np.zeros((0, 2)), [], [[0, 0]])
    with pytest.raises(ValueError):
        knn_classify([[0.0]], [0], [[0.0]], k=2)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    vecs = {k: rng.normal(size=(3, 4)).astype(np.float32) for k in ("pre", "gate", "post")}
    d = ActivationDump(np.array([4, 4, 9]), np.array([0, 1, 0]), vecs, "before")
    path = export_activations(d, tmp_path / "acts.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "class,instance,kind,v0,v1,v2,v3"
    assert len(lines) == 1 + 3 * 3
    assert [l.split(",")[2] for l in lines[1:4]] == ["pre", "gate", "post"]
    back = read_activations(path, "before")
    assert back.kinds == d.kinds
    np.testing.assert_array_equal(back.class_ids, d.class_ids)
    np.testing.assert_array_equal(back.instance_ids, d.instance_ids)
    for k in d.kinds:
        np.testing.assert_array_equal(back.vectors[k], d.vectors[k])
    one = ActivationDump(np.array([0]), np.array([0]), {k: v[:1] for k, v in vecs.items()})
    assert len(export_activations(one, tmp_path / "one.csv").read_text().splitlines()) == 4
    with pytest.raises(ValueError):
        export_activations(_dump(np.zeros((0, 4))), tmp_path / "none.csv")


def test_capture_anml_post_below_pre(build, small_store):
    m = build("ANML", seed=2)
    x = small_store.images[small_store.meta_test[:3]].reshape(-1, 14, 14)
    d = capture_activations(m, x, np.repeat(np.arange(3), 20), np.tile(np.arange(20), 3), "before")
    assert d.kinds == ("pre", "gate", "post") and len(d) == 60 and d.dim == 144
    assert (d.vectors["post"] <= d.vectors["pre"]).all()
    assert (d.vectors["gate"] >= 0).all() and (d.vectors["gate"] <= 1).all()


def test_capture_oml_latent(build, small_store):
    m = build("OML")
    d = capture_activations(m, small_store.images[0, :4], np.zeros(4), np.arange(4), "after")
    assert d.kinds == ("latent",) and d.dim == m.latent_size


def test_random_nm_control(build):
    m = build("ANML", seed=3)
    r = random_nm_model(m, 0)
    assert r.params.fingerprint(["pln.fc.weight", "pln.conv1.weight"]) == m.params.fingerprint(["pln.fc.weight", "pln.conv1.weight"])
    assert r.params.fingerprint(["nm.conv1.weight"]) != m.params.fingerprint(["nm.conv1.weight"])
    assert random_nm_model(m, 0).params.fingerprint() == r.params.fingerprint()


def test_analyze_report(build, small_store, tmp_path):
    m = build("ANML", seed=0)
    ids = small_store.meta_test[:4]
    tr_x = small_store.images[ids, :15].reshape(-1, 14, 14)
    te_x = small_store.images[ids, 15:].reshape(-1, 14, 14)
    dump, stats = analyze(m, tr_x, np.repeat(np.arange(4), 15), te_x, np.repeat(np.arange(4), 5), phase="before")
    assert len(dump) == 20
    assert set(stats["knn"]) == {"pre", "gate", "post"}
    assert set(stats["knn_random_nm"]) == {"gate", "post"}
    assert all(0 <= v <= 1 for v in stats["knn"].values())
    text = write_stats(stats, tmp_path / "stats.txt").read_text()
    assert "sparsity.post.mean_active_fraction = " in text and "phase = before" in text
