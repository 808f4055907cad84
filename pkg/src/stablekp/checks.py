"""Seeded finite-difference suites for every differentiable objective.

Each suite checks one argument at a time with the others held constant and
returns a :class:`~stablekp.autodiff.GradCheckReport` per (loss, argument).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, grad_check
from .descriptor import triplet_loss_strong, triplet_loss_weak
from .fpn import FPNConfig, init_params
from .geometry import PointCloud, random_se3
from .losses import (chamfer_loss, point_to_plane_loss, point_to_point_loss, prob_chamfer_loss,
                     total_loss)
from .training import TrainConfig, make_pairs, pair_loss

LOSS_TOL = 1e-6
FPN_TOL = 1e-4
# Base step of the kink probe; smooth coordinates are then re-estimated on a
# wider stencil (see autodiff._probe) so roundoff stays small for tiny entries.
STEP = 1e-5
# The network objective is O(100), so its probe starts a little wider.
FPN_STEP = 3e-5
SCOPES = ("losses", "fpn", "all")


def _unit(rng, n, d=3):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _slots(name: str, fn, args: list, which) -> dict[str, GradCheckReport]:
    out = {}
    for k in which:
        def f(x, k=k):
            a = list(args)
            a[k] = x
            res = fn(*a)
            return res[0] if isinstance(res, tuple) else res
        out[f"{name}[{k}]"] = grad_check(f, args[k], h=STEP)
    return out


def loss_checks(seed: int = 0) -> dict[str, GradCheckReport]:
    """All loss functions on one random instance."""
    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}
    Q, Qp = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    reports.update(_slots("chamfer", chamfer_loss, [Q, Qp], (0, 1)))

    S, Sp = rng.uniform(0.3, 2.0, 5), rng.uniform(0.3, 2.0, 6)
    reports.update(_slots("prob_chamfer", prob_chamfer_loss, [Q, S, Qp, Sp], (0, 1, 2, 3)))

    X = PointCloud(rng.normal(size=(20, 3)), _unit(rng, 20))
    Xt = PointCloud(rng.normal(size=(25, 3)), _unit(rng, 25))
    Qt = rng.normal(size=(5, 3))
    reports.update(_slots("point_to_point", point_to_point_loss, [Q, X, Qt, Xt], (0, 2)))
    reports.update(_slots("point_to_plane", point_to_plane_loss, [Q, X, Qt, Xt], (0, 2)))
    reports.update(_slots("total", lambda q, s, qp, sp: total_loss(q, s, qp, sp, X, Xt, Qt, 0.5),
                          [Q, S, Q + 0.1 * rng.normal(size=Q.shape), S[::-1].copy()], (0, 1, 2, 3)))

    Fa, Fp, Fn = _unit(rng, 4, 8), _unit(rng, 6, 8), _unit(rng, 7, 8)
    sig = rng.uniform(0.1, 0.9, 4)
    weak = lambda a, p, n: triplet_loss_weak(a, sig, p, n, gamma=1.5, xi=1.0)
    reports.update(_slots("triplet_weak", weak, [Fa, Fp, Fn], (0, 1, 2)))

    q = rng.normal(size=(4, 3))
    G = random_se3("full", 1.0, rng)
    Gp = random_se3("full", 1.0, rng)
    qp = Gp.compose(G.inverse()).apply(q + 0.01 * rng.normal(size=q.shape))
    F2, F2p = _unit(rng, 4, 8), _unit(rng, 4, 8)
    strong = lambda f, fp: triplet_loss_strong(f, q, fp, qp, G, Gp, gamma=1.5, rho=0.1, xi=1.0,
                                               sigmas=sig, seed=seed)
    reports.update(_slots("triplet_strong", strong, [F2, F2p], (0, 1)))
    return reports


def fpn_check(seed: int = 0, n_points: int = 64, per_param: int = 4, h: float = FPN_STEP) -> GradCheckReport:
    """End-to-end training objective w.r.t. network weights on a small cloud."""
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(-0.5, 0.5, size=(n_points, 3)))
    cfg = TrainConfig(fpn=FPNConfig(M=16, K_nodes=4), seed=seed)
    params = init_params(cfg.fpn, seed)
    # zero biases put every node's own point exactly on a ReLU hinge; move off it
    for name, val in params.items():
        if name.endswith(".b"):
            val.data = val.data + rng.normal(0.0, 0.05, size=val.data.shape)
    pair = make_pairs(cloud, 1, cfg.augmentation, seed)[0]
    loss = lambda: pair_loss(pair, params, cfg, seed)[0]
    return ad.grad_check_store(loss, params, h=h, per_param=per_param, seed=seed, refine=True)


def run_scope(scope: str, instances: int = 20, seed: int = 0) -> list[tuple[str, float, int, int, float]]:
    """Rows of (check, worst relative error, coordinates checked, kinks, tolerance)."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    rows = []
    if scope in ("losses", "all"):
        agg: dict[str, list] = {}
        for i in range(instances):
            for name, rep in loss_checks(seed + i).items():
                agg.setdefault(name, []).append(rep)
        for name, reps in agg.items():
            rows.append((name, max(r.max_rel_error for r in reps), sum(r.n_checked for r in reps),
                         sum(len(r.kinks) for r in reps), LOSS_TOL))
    if scope in ("fpn", "all"):
        reps = [fpn_check(seed + i) for i in range(instances)]
        rows.append(("fpn_objective", max(r.max_rel_error for r in reps),
                     sum(r.n_checked for r in reps), sum(len(r.kinks) for r in reps), FPN_TOL))
    return rows
