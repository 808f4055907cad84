import numpy as np
import pytest
from hypothesis import given, strategies as st

from stablekp import autodiff as ad
from stablekp.autodiff import ParamStore, Tape, Value
from stablekp.errors import InvalidArgumentError, TrainingDivergedError

seeds = st.integers(0, 2**31 - 1)


def grads_of(fn, *arrays):
    vals = [Value(np.array(a, float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*vals)
    tape.backward(out)
    return out, [v.grad for v in vals]


def test_dense_identity_and_zero_input():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(ad.dense(x, np.eye(3), np.zeros(3)).data, x)
    b = np.array([0.5, 1.5])
    assert np.array_equal(ad.dense(np.zeros(3), np.ones((2, 3)), b).data, b)


def test_dense_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        ad.dense(np.zeros(3), np.ones((2, 4)), np.zeros(2))


@given(seeds)
def test_dense_gradients_fd(seed):
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.normal(size=5)
    c = rng.normal(size=(4, 5))
    f = lambda x_, W_, b_: ad.total(ad.dense(x_, W_, b_) * c)
    for k, arr in enumerate((x, W, b)):
        def g(v, k=k):
            args = [x, W, b]
            args[k] = v
            return f(*args)
        assert ad.grad_check(g, arr, h=1e-5).max_rel_error < 1e-6


def test_relu_softplus_values():
    assert ad.relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert abs(float(ad.softplus(0.0).data) - np.log(2)) < 1e-15
    # stable branches: no overflow for large x, no cancellation for very negative x
    big = ad.softplus(np.array([-700.0, 800.0])).data
    assert big[0] > 0 and big[1] == 800.0


def test_softplus_gradient_at_3():
    rep = ad.grad_check(lambda v: ad.total(ad.softplus(v)), np.array([3.0]))
    assert rep.max_rel_error < 1e-6 and rep.n_checked == 1


def test_maxpool_identity_and_empty():
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(ad.set_maxpool(x).data, x[0])
    with pytest.raises(InvalidArgumentError):
        ad.set_maxpool(np.zeros((0, 3)))


@given(seeds)
def test_maxpool_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 4))
    assert np.array_equal(ad.set_maxpool(x).data, ad.set_maxpool(x[rng.permutation(7)]).data)


def test_maxpool_routes_to_first_argmax():
    x = np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 0.0]])
    _, (g,) = grads_of(lambda v: ad.total(ad.set_maxpool(v)), x)
    assert g.tolist() == [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]
    rep = ad.grad_check(lambda v: ad.total(ad.set_maxpool(v) * np.array([2.0, 3.0])),
                        np.array([[1.0, 4.0], [3.0, 5.0], [2.0, 0.0]]))
    assert rep.max_rel_error < 1e-8 and not rep.kinks


def test_l2_normalize_unit_and_gradient():
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.allclose(np.linalg.norm(ad.l2_normalize(x).data, axis=1), 1.0, atol=1e-12)
    c = np.random.default_rng(1).normal(size=(3, 5))
    assert ad.grad_check(lambda v: ad.total(ad.l2_normalize(v) * c), x, h=1e-5).max_rel_error < 1e-6


@given(seeds)
def test_composite_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4)) + 3.0

    def f(v):
        y = ad.log(ad.square(v) + 1.0) / (v * 0.5 + 4.0) - ad.concat([v[:, :2], v[:, 2:]], -1)
        return ad.total(ad.gather(y, [0, 2, 2]))

    assert ad.grad_check(f, x, h=1e-5).max_rel_error < 1e-6


def test_grad_check_quadratic_exact():
    x = np.random.default_rng(2).normal(size=10)
    assert ad.grad_check(lambda v: ad.total(ad.square(v)), x).max_rel_error < 1e-8


def test_grad_check_reports_relu_kink():
    x = np.array([0.0, 1.0, -2.0])
    rep = ad.grad_check(lambda v: ad.total(ad.relu(v)), x)
    assert rep.kinks == [0] and rep.n_checked == 2 and rep.max_rel_error < 1e-8


def test_grad_check_does_not_excuse_wrong_gradient():
    x = np.array([0.7, -0.3])
    wrong = lambda v: ad.scalar_op(float((v.data ** 2).sum()), [(v, 3.0 * v.data)])
    rep = ad.grad_check(wrong, x)
    assert not rep.kinks and rep.max_rel_error > 0.3


def test_adam_zero_gradient():
    s = ParamStore()
    s.add("w", [1.0, 2.0])
    ad.adam_step(s, lr=0.1)
    assert s["w"].data.tolist() == [1.0, 2.0] and s.step == 1


@pytest.mark.parametrize("g", [3.0, -0.25])
def test_adam_first_step_sign(g):
    s = ParamStore()
    s.add("w", 0.5)
    s["w"].grad = np.array(g)
    ad.adam_step(s, lr=0.01)
    assert abs(float(s["w"].data) - (0.5 - 0.01 * np.sign(g))) < 1e-9
    assert float(s["w"].grad) == 0.0


def test_adam_quadratic_bowl():
    s = ParamStore()
    w = s.add("w", 1.0)
    for _ in range(200):
        with Tape() as tape:
            loss = ad.square(w)
        tape.backward(loss)
        ad.adam_step(s, lr=0.1)
    assert abs(float(w.data)) < 1e-3


def test_adam_non_finite():
    s = ParamStore()
    s.add("layer.W", [1.0])
    s["layer.W"].grad = np.array([np.nan])
    with pytest.raises(TrainingDivergedError, match="layer.W"):
        ad.adam_step(s)


def test_tape_replay_deterministic():
    rng = np.random.default_rng(3)
    x, W = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    outs = [grads_of(lambda a, b: ad.total(ad.relu(ad.dense(a, b, np.zeros(4)))), x, W)
            for _ in range(2)]
    assert outs[0][0].data == outs[1][0].data
    assert all(np.array_equal(a, b) for a, b in zip(outs[0][1], outs[1][1]))


def test_checkpoint_roundtrip(tmp_path):
    s = ParamStore()
    s.add("a.W", np.arange(6.0).reshape(2, 3))
    s.add("a.b", [0.5, -0.5])
    s.meta["M"] = np.asarray(64.0)
    s["a.W"].grad = np.ones((2, 3))
    s["a.b"].grad = np.ones(2)
    ad.adam_step(s)
    ad.save_checkpoint(tmp_path / "c.bin", s)
    t = ad.load_checkpoint(tmp_path / "c.bin")
    assert t.step == 1 and float(t.meta["M"]) == 64.0
    for name in s:
        assert np.array_equal(t[name].data, s[name].data)
        assert np.array_equal(t.m[name], s.m[name]) and np.array_equal(t.v[name], s.v[name])
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"USIP" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_corrupt(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "x.bin")
    s = ParamStore()
    s.add("w", np.ones(10))
    ad.save_checkpoint(tmp_path / "y.bin", s)
    (tmp_path / "z.bin").write_bytes((tmp_path / "y.bin").read_bytes()[:-20])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "z.bin")
