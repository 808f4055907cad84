import numpy as np
import pytest

from stablekp import autodiff as ad
from stablekp.descriptor import (DescriptorConfig, DescriptorTrainConfig, default_radius, describe,
                                 init_descriptor_params, mine_negatives, sigma_weights,
                                 train_descriptor, triplet_loss_strong, triplet_loss_weak)
from stablekp.errors import InvalidArgumentError
from stablekp.fpn import KeypointSet
from stablekp.geometry import PointCloud, RigidTransform, random_se3
from stablekp.synthetic import gen_synthetic

CFG = DescriptorConfig(dim=16, widths=(16, 32), head=(32,), max_points=32)


@pytest.fixture(scope="module")
def params():
    return init_descriptor_params(CFG, 0)


def test_config_validation():
    for bad in (dict(dim=0), dict(widths=()), dict(head=(0,)), dict(radius_fraction=0.0)):
        with pytest.raises(InvalidArgumentError):
            DescriptorConfig(**bad)


def test_unit_norm_and_translation_invariance(params):
    pc, _ = gen_synthetic("l_bracket", 600, 0.0, 1)
    kps = pc.points[::50]
    r = default_radius(pc, CFG)
    a = describe(pc, kps, r, params, CFG)
    assert np.all(np.abs(np.linalg.norm(a.vectors, axis=1) - 1) < 1e-9)
    t = np.array([3.0, -1.5, 0.25])
    b = describe(PointCloud(pc.points + t), kps + t, r, params, CFG)
    assert np.abs(a.vectors - b.vectors).max() < 1e-9


def test_duplicate_patch(params):
    rng = np.random.default_rng(0)
    patch = rng.uniform(-0.1, 0.1, (40, 3))
    c1, c2 = np.array([0.0, 0, 0]), np.array([5.0, 0, 0])
    pc = PointCloud(np.concatenate([patch + c1, patch[::-1] + c2]))
    d = describe(pc, np.stack([c1, c2]), 0.3, params, CFG)
    assert np.abs(d.vectors[0] - d.vectors[1]).max() < 1e-9


def test_empty_ball_flagged(params):
    pc = PointCloud(np.random.default_rng(1).uniform(0, 1, (100, 3)))
    d = describe(pc, np.array([[0.5, 0.5, 0.5], [10.0, 10, 10]]), 0.2, params, CFG)
    assert d.empty.tolist() == [False, True]
    assert np.all(np.abs(np.linalg.norm(d.vectors, axis=1) - 1) < 1e-9)
    with pytest.raises(InvalidArgumentError):
        describe(pc, np.zeros((1, 3)), 0.0, params, CFG)


def test_sigma_weights_sum():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.uniform(0, 2, 17)
        w, zero = sigma_weights(s, 1.0)
        if not zero:
            assert abs(w.sum() - 17) < 1e-9
    w, zero = sigma_weights([1.5, 2.0], 1.0)
    assert zero and not w.any()


def test_weak_inactive_hinge():
    Fa = np.eye(4)
    Fn = -np.eye(4)
    loss, info = triplet_loss_weak(Fa, np.full(4, 0.1), Fa.copy(), Fn, gamma=0.5, xi=1.0)
    assert loss == 0.0 and info.n_active == 0


def test_weak_all_sigmas_large():
    F = np.random.default_rng(0).normal(size=(5, 3))
    loss, info = triplet_loss_weak(F, np.full(5, 2.0), F, F, gamma=1.0, xi=1.0)
    assert loss == 0.0 and info.all_weights_zero


def test_weak_value_by_hand():
    Fa = np.array([[1.0, 0], [0, 1]])
    Fp = np.array([[0.6, 0.8]])
    Fn = np.array([[1.0, 0]])
    sig = np.array([0.2, 0.6])
    loss, info = triplet_loss_weak(Fa, sig, Fp, Fn, gamma=0.1, xi=1.0)
    w = 2 * np.array([0.8, 0.4]) / 1.2
    dp = np.linalg.norm(Fa - Fp, axis=1)
    dn = np.linalg.norm(Fa - Fn, axis=1)
    expected = sum(wm * max(a - b + 0.1, 0) for wm, a, b in zip(w, dp, dn))
    assert abs(loss - expected) < 1e-12


def _toy(seed):
    rng = np.random.default_rng(seed)
    Q = rng.uniform(-1, 1, (4, 3)) * 2
    F = rng.normal(size=(4, 6))
    Fp = F + rng.normal(0, 0.3, F.shape)
    return Q, F, Fp, rng.uniform(0.1, 0.9, 4)


def test_strong_gamma_only():
    Q = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    F = np.tile([1.0, 0, 0], (4, 1))
    I = RigidTransform.identity()
    sig = np.array([0.1, 0.2, 0.3, 0.4])
    loss, info = triplet_loss_strong(F, Q, F.copy(), Q.copy(), I, I, gamma=0.3, rho=0.5, xi=1.0,
                                     sigmas=sig)
    assert info.skipped == 0
    assert abs(loss - 0.3 * info.weights.sum()) < 1e-12 and abs(info.weights.sum() - 4) < 1e-12


def test_strong_all_skipped():
    Q, F, Fp, sig = _toy(0)
    I = RigidTransform.identity()
    loss, info = triplet_loss_strong(F, Q, Fp, Q + 5.0, I, I, gamma=0.3, rho=0.01, xi=1.0,
                                     sigmas=sig)
    assert loss == 0.0 and info.skipped == 4


def test_strong_respects_poses():
    Q, F, Fp, sig = _toy(1)
    G = random_se3("full", 1.0, 3)
    Gp = random_se3("full", 1.0, 4)
    Qp = Gp.compose(G.inverse()).apply(Q)
    I = RigidTransform.identity()
    a = triplet_loss_strong(F, Q, Fp, Q, I, I, 0.3, 0.1, 1.0, sig, seed=5)
    b = triplet_loss_strong(F, Q, Fp, Qp, G, Gp, 0.3, 0.1, 1.0, sig, seed=5)
    assert abs(a[0] - b[0]) < 1e-12 and a[1].skipped == b[1].skipped == 0


def test_mining_split():
    rng = np.random.default_rng(0)
    dist = np.array([0.05, 0.2, 0.3, 0.4, 0.5, 0.6])
    negs = mine_negatives(dist, 0.1, 4, rng)
    assert len(negs) == 4 and set(negs[:2]) == {1, 2} and 0 not in negs
    assert len(mine_negatives(np.array([0.01]), 0.1, 2, rng)) == 0


@pytest.mark.parametrize("seed", range(5))
def test_triplet_gradients(seed):
    Q, F, Fp, sig = _toy(seed)
    I = RigidTransform.identity()
    strong = lambda f, fp: triplet_loss_strong(f, Q, fp, Q, I, I, 1.5, 0.1, 1.0, sig, seed=seed)[0]
    weak = lambda a, p, n: triplet_loss_weak(a, sig, p, n, 1.5, 1.0)[0]
    Fn = np.random.default_rng(seed + 100).normal(size=(5, 6))
    for rep in (ad.grad_check(lambda x: strong(x, Fp), F, h=1e-5),
                ad.grad_check(lambda x: strong(F, x), Fp, h=1e-5),
                ad.grad_check(lambda x: weak(x, Fp, Fn), F, h=1e-5),
                ad.grad_check(lambda x: weak(F, x, Fn), Fp, h=1e-5),
                ad.grad_check(lambda x: weak(F, Fp, x), Fn, h=1e-5)):
        assert rep.n_checked > 0 and rep.max_rel_error < 1e-6


def test_descriptor_training_runs():
    pc, _ = gen_synthetic("box", 300, 0.0, 0)
    T = random_se3("full", 0.2, 1)
    pairs = [(pc, PointCloud(T.apply(pc.points)), T)]
    det = lambda c: KeypointSet(c.points[:16], np.linspace(0.1, 0.5, 16))
    cfg = DescriptorTrainConfig(steps=5, desc=CFG)
    params, losses = train_descriptor(pairs, det, cfg)
    assert len(losses) == 5 and all(np.isfinite(losses))
    with pytest.raises(InvalidArgumentError):
        train_descriptor([], det, cfg)
