import numpy as np
import pytest

from anml import nn
from anml.autodiff import Tensor, backward, ops
from anml.nn import AdamState, Flags, ParameterSet


def _params(seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return ParameterSet(
        {
            "a.weight": Tensor(rng.normal(size=(3, 2)).astype(dtype)),
            "a.bias": Tensor(rng.normal(size=3).astype(dtype)),
            "b.weight": Tensor(rng.normal(size=(2, 2, 1, 1)).astype(dtype)),
        },
        {
            "a.weight": Flags(True, True, False),
            "a.bias": Flags(True, False, True),
            "b.weight": Flags(False, False, False),
        },
    )


def test_layer_output_shapes():
    specs = [nn.conv("c1", 1, 4, 3, 1), nn.batchnorm("bn1", 4), nn.relu(), nn.conv("c2", 4, 4, 3, 2), nn.affine("fc", 16, 5)]
    assert nn.chain_output_shape(specs, (1, 8, 8)) == (5,)
    with pytest.raises(nn.ShapeError, match="c1"):
        nn.chain_output_shape(specs, (2, 8, 8))
    with pytest.raises(nn.ShapeError, match="smaller than kernel"):
        nn.conv("c", 1, 1, 5).output_shape((1, 3, 3))


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        nn.LayerSpec("pool", "p")
    with pytest.raises(ValueError):
        nn.LayerSpec("affine", "", 3, 3)
    with pytest.raises(ValueError):
        nn.conv("c", 1, 1, stride=0)


def test_init_parameters_bounds_and_determinism():
    specs = [nn.conv("c", 2, 3, 3), nn.batchnorm("bn", 3), nn.affine("fc", 12, 4)]
    p = nn.init_parameters(specs, 7, (2, 4, 4))
    q = nn.init_parameters(specs, 7, (2, 4, 4))
    assert p.fingerprint() == q.fingerprint()
    assert np.abs(p["c.weight"].data).max() <= np.sqrt(1 / 18)
    assert np.abs(p["fc.weight"].data).max() <= np.sqrt(1 / 12)
    np.testing.assert_array_equal(p["bn.weight"].data, 1.0)
    np.testing.assert_array_equal(p["bn.bias"].data, 0.0)
    np.testing.assert_array_equal(p["fc.bias"].data, 0.0)
    assert p["fc.weight"].shape == (4, 12)
    assert p.count() == 2 * 3 * 9 + 3 + 6 + 48 + 4


def test_flags_round_trip_and_read_only():
    for f in (Flags(), Flags(True), Flags(True, True, True), Flags(False, False, True)):
        assert Flags.parse(f.label()) == f
    p = _params()
    with pytest.raises(TypeError):
        p.flags["a.weight"] = Flags()
    assert p.where("inner_plastic") == ["a.weight"]
    assert p.where("metatest_plastic") == ["a.bias"]
    with pytest.raises(ValueError):
        p.where("plastic")


def test_parameter_set_copy_and_replace():
    p = _params()
    c = p.copy()
    c["a.weight"].data[0, 0] = 99.0
    assert p["a.weight"].data[0, 0] != 99.0
    r = p.replace({"a.bias": Tensor(np.zeros(3, dtype=np.float32))})
    assert r.flags == p.flags
    assert r.fingerprint(["a.weight"]) == p.fingerprint(["a.weight"])
    assert r.fingerprint() != p.fingerprint()
    with pytest.raises(KeyError):
        p.replace({"zzz": Tensor(np.zeros(1))})


def test_sgd_step_touches_only_plastic():
    p = _params()
    grads = [Tensor(np.ones((3, 2), dtype=np.float32))]
    q = nn.sgd_step(p, grads, 0.5)
    np.testing.assert_allclose(q["a.weight"].data, p["a.weight"].data - 0.5)
    assert q["a.bias"] is p["a.bias"] and q["b.weight"] is p["b.weight"]
    q0 = nn.sgd_step(p, grads, 0.0)
    assert q0.fingerprint() == p.fingerprint()
    with pytest.raises(ValueError):
        nn.sgd_step(p, grads, -1.0)
    with pytest.raises(ValueError, match="shape"):
        nn.sgd_step(p, [Tensor(np.ones(3))], 0.1)


def test_differentiable_sgd_step_keeps_graph():
    p = _params(dtype=np.float64)
    leaves = p.as_leaves(["a.weight"])
    w = leaves["a.weight"]
    loss = ops.sum(ops.mul(w, w))
    (g,) = backward(loss, [w], create_graph=True)
    q = nn.sgd_step(leaves, [g], 0.25, differentiable=True)
    # d/dw sum((w - 0.25 * 2w)^2) = 2 * 0.25 * w
    (gw,) = backward(ops.sum(ops.mul(q["a.weight"], q["a.weight"])), [w])
    np.testing.assert_allclose(gw.data, 0.5 * w.data, rtol=1e-12)


def test_adam_matches_reference():
    p = _params(dtype=np.float64)
    state = AdamState.for_params(p)
    assert sorted(state.m) == ["a.bias", "a.weight"]
    rng = np.random.default_rng(1)
    ref = {n: p[n].data.copy() for n in ("a.weight", "a.bias")}
    m = {n: np.zeros_like(v) for n, v in ref.items()}
    v = {n: np.zeros_like(x) for n, x in ref.items()}
    for t in range(1, 4):
        grads = {n: rng.normal(size=ref[n].shape) for n in ref}
        p = nn.adam_step(p, {n: Tensor(g) for n, g in grads.items()}, state, 0.01)
        for n, g in grads.items():
            m[n] = 0.9 * m[n] + 0.1 * g
            v[n] = 0.999 * v[n] + 0.001 * g * g
            ref[n] = ref[n] - 0.01 * (m[n] / (1 - 0.9**t)) / (np.sqrt(v[n] / (1 - 0.999**t)) + 1e-8)
    for n in ref:
        np.testing.assert_allclose(p[n].data, ref[n], rtol=1e-12)
    assert state.step == 3


def test_adam_zero_learning_rate():
    p = _params()
    state = AdamState.for_params(p)
    q = nn.adam_step(p, [np.ones((3, 2)), np.ones(3)], state, 0.0)
    assert q.fingerprint() == p.fingerprint()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = _params()
    state = AdamState.for_params(p)
    p = nn.adam_step(p, [np.full((3, 2), 0.3), np.full(3, -0.2)], state, 0.01)
    nn.save_checkpoint(tmp_path / "ck", p, {"iteration": 7, "note": "x y"}, state)
    lines = (tmp_path / "ck" / "manifest.txt").read_text().splitlines()
    assert lines[0] == nn.CHECKPOINT_VERSION
    assert "param a.weight float32 3x2 meta_learned,inner_plastic 0" in lines
    ck = nn.load_checkpoint(tmp_path / "ck")
    assert ck.params.names() == p.names()
    for n in p:
        assert ck.params[n].data.tobytes() == p[n].data.tobytes()
    assert dict(ck.params.flags) == dict(p.flags)
    assert ck.metadata["iteration"] == "7" and ck.metadata["note"] == "x y"
    assert ck.adam.step == 1
    for n in state.m:
        assert ck.adam.m[n].tobytes() == state.m[n].tobytes()
        assert ck.adam.v[n].tobytes() == state.v[n].tobytes()
    raw = (tmp_path / "ck" / "params.bin").read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw[:24], dtype="<f4").reshape(3, 2), p["a.weight"].data)


def test_checkpoint_errors(tmp_path):
    nn.save_checkpoint(tmp_path / "ck", _params())
    blob = tmp_path / "ck" / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        nn.load_checkpoint(tmp_path / "ck")
    (tmp_path / "ck" / "manifest.txt").write_text("something else\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        nn.load_checkpoint(tmp_path / "ck")
    with pytest.raises(ValueError):
        nn.save_checkpoint(tmp_path / "bad", _params(), {"two words": 1})
