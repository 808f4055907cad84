"""Ball-neighbourhood local descriptor and the sigma-weighted triplet losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value, data_of, scalar_op
from .errors import InvalidArgumentError
from .fpn import KeypointSet, mlp
from .geometry import NeighborIndex, RigidTransform, as_cloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DescriptorConfig:
    dim: int = 32
    widths: tuple = (32, 64)
    head: tuple = (64,)
    max_points: int = 64
    radius_fraction: float = 0.1  # ball radius as a fraction of cloud diameter

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "head", tuple(int(w) for w in self.head))
        if self.dim < 1 or self.max_points < 1 or not self.widths:
            raise InvalidArgumentError("descriptor dims, widths and max_points must be positive")
        if min(self.widths + self.head) < 1:
            raise InvalidArgumentError("layer widths must be >= 1")
        if not self.radius_fraction > 0:
            raise InvalidArgumentError("radius_fraction must be > 0")


def init_descriptor_params(cfg: DescriptorConfig = DescriptorConfig(), seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    n_in = 3
    for li, w in enumerate(cfg.widths):
        store.add(f"desc.local.{li}.W", rng.normal(0.0, np.sqrt(2.0 / n_in), size=(w, n_in)))
        store.add(f"desc.local.{li}.b", np.zeros(w))
        n_in = w
    for li, w in enumerate(cfg.head + (cfg.dim,)):
        store.add(f"desc.head.{li}.W", rng.normal(0.0, np.sqrt(2.0 / n_in), size=(w, n_in)))
        store.add(f"desc.head.{li}.b", np.full(w, 0.01))
        n_in = w
    return store


@dataclass(eq=False)
class DescriptorSet:
    vectors: np.ndarray   # (M, L), unit rows
    empty: np.ndarray     # (M,) bool, True where the ball held no points
    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.vectors)


def _ball_table(cloud, centers: np.ndarray, radius: float, cap: int):
    """Padded member table of each ball, nearest points first, and the empty mask."""
    pts = as_cloud(cloud).points
    index = NeighborIndex(pts)
    rows, empty = [], np.zeros(len(centers), dtype=bool)
    for m, c in enumerate(centers):
        members = index.radius(c, radius)
        if len(members) == 0:
            empty[m] = True
            rows.append(np.zeros(0, dtype=np.int64))
            continue
        d2 = ((pts[members] - c) ** 2).sum(axis=1)
        rows.append(members[np.lexsort((members, d2))][:cap])
    width = max([1] + [len(r) for r in rows])
    table = np.zeros((len(centers), width), dtype=np.int64)
    for m, r in enumerate(rows):
        if len(r):
            table[m, :len(r)] = r
            table[m, len(r):] = r[0]
    return pts, table, empty


def describe_value(cloud, kps, radius: float, params: ParamStore,
                   cfg: DescriptorConfig = DescriptorConfig()) -> tuple[Value, np.ndarray]:
    """Differentiable descriptors (an (M, L) Value) plus the empty-ball mask."""
    if not radius > 0:
        raise InvalidArgumentError("radius must be > 0")
    centers = kps.positions if isinstance(kps, KeypointSet) else np.asarray(kps, dtype=np.float64)
    pts, table, empty = _ball_table(cloud, centers, radius, cfg.max_points)
    local = pts[table] - centers[:, None, :]
    feat = ad.set_maxpool(mlp(Value(local), params, "desc.local", len(cfg.widths)), axis=1)
    if empty.any():
        feat = feat * (~empty)[:, None].astype(np.float64)
    out = mlp(feat, params, "desc.head", len(cfg.head) + 1, final_relu=False)
    return ad.l2_normalize(out, axis=-1), empty


def describe(cloud, kps, radius: float, params: ParamStore,
             cfg: DescriptorConfig = DescriptorConfig()) -> DescriptorSet:
    """Unit-norm descriptors of the ball around every keypoint.

    Points are expressed relative to the keypoint, so a joint translation of
    cloud and keypoints leaves the output unchanged. An empty ball feeds a zero
    feature into the head and is flagged.
    """
    vec, empty = describe_value(cloud, kps, radius, params, cfg)
    v = vec.data.copy()
    norms = np.linalg.norm(v, axis=1)
    degenerate = norms < 0.5  # head output was ~0; fall back to a fixed unit vector
    v[degenerate] = 0.0
    v[degenerate, 0] = 1.0
    return DescriptorSet(v, empty, np.arange(len(v)))


def default_radius(cloud, cfg: DescriptorConfig = DescriptorConfig()) -> float:
    pts = as_cloud(cloud).points
    return cfg.radius_fraction * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


@dataclass
class TripletInfo:
    weights: np.ndarray
    skipped: int = 0
    all_weights_zero: bool = False
    n_active: int = 0


def sigma_weights(sigmas, xi: float) -> tuple[np.ndarray, bool]:
    """w_m = M·ŵ_m/Σŵ with ŵ_m = max(ξ − σ_m, 0); all zeros if every ŵ vanishes."""
    s = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    w_hat = np.maximum(xi - s, 0.0)
    total = w_hat.sum()
    if total <= 0:
        return np.zeros_like(s), True
    return len(s) * w_hat / total, False


def _dist_grad(f: np.ndarray, g: np.ndarray) -> tuple[float, np.ndarray]:
    diff = f - g
    d = float(np.sqrt(diff @ diff))
    return d, (diff / d if d > 0 else np.zeros_like(diff))


def triplet_loss_weak(F_anc, S_anc, F_pos, F_neg, gamma: float, xi: float):
    """Weighted hinge on nearest positive vs nearest negative descriptor per anchor.

    Weights come from the detector's sigmas and carry no gradient. Returns
    ``(loss, TripletInfo)``; ``loss`` is a Value when any input is one.
    """
    if not gamma > 0 or not xi > 0:
        raise InvalidArgumentError("gamma and xi must be > 0")
    fa, fp, fn = data_of(F_anc), data_of(F_pos), data_of(F_neg)
    for arr, what in ((fa, "F_anc"), (fp, "F_pos"), (fn, "F_neg")):
        if arr.ndim != 2 or len(arr) == 0:
            raise InvalidArgumentError(f"{what} must be a nonempty 2-D array")
    w, zero = sigma_weights(S_anc, xi)
    if len(w) != len(fa):
        raise InvalidArgumentError("one sigma per anchor descriptor is required")
    if zero:
        log.warning("all triplet weights vanished (every sigma >= xi)")
    ga, gp, gn = np.zeros_like(fa), np.zeros_like(fp), np.zeros_like(fn)
    value, active = 0.0, 0
    for m in range(len(fa)):
        if w[m] == 0:
            continue
        i = int(np.argmin(((fp - fa[m]) ** 2).sum(axis=1)))
        j = int(np.argmin(((fn - fa[m]) ** 2).sum(axis=1)))
        dp, up = _dist_grad(fa[m], fp[i])
        dn, un = _dist_grad(fa[m], fn[j])
        h = dp - dn + gamma
        if h <= 0:
            continue
        active += 1
        value += w[m] * h
        ga[m] += w[m] * (up - un)
        gp[i] -= w[m] * up
        gn[j] += w[m] * un
    info = TripletInfo(w, 0, zero, active)
    grads = [(F_anc, ga), (F_pos, gp), (F_neg, gn)]
    if any(isinstance(v, Value) for v, _ in grads):
        return scalar_op(value, grads), info
    return float(value), info


def mine_negatives(dist: np.ndarray, rho: float, n_neg: int, rng: np.random.Generator) -> np.ndarray:
    """Half hardest (closest beyond rho), half random among the rest beyond rho."""
    far = np.flatnonzero(dist >= rho)
    if len(far) == 0:
        return far
    far = far[np.lexsort((far, dist[far]))]
    n_hard = min(n_neg - n_neg // 2, len(far))
    hard = far[:n_hard]
    rest = far[n_hard:]
    n_rand = min(n_neg // 2, len(rest))
    rand = rng.choice(rest, size=n_rand, replace=False) if n_rand else np.zeros(0, dtype=np.int64)
    return np.concatenate([hard, np.sort(rand)]).astype(np.int64)


def triplet_loss_strong(F, Q, Fp, Qp, G: RigidTransform, Gp: RigidTransform, gamma: float,
                        rho: float, xi: float, sigmas, seed=0, n_neg: int = 2):
    """Pose-supervised triplet loss with mixed random/hard negative mining.

    The positive of anchor m is the keypoint of the second cloud closest to
    ``Q_m`` after mapping by G·G'⁻¹, if that distance is below ``rho``.
    Anchors without a positive or without any negative beyond ``rho`` are
    skipped; the sigma weights are normalised over the remaining anchors and
    each anchor's hinge is averaged over its mined negatives.
    """
    if not rho > 0 or not gamma > 0 or not xi > 0:
        raise InvalidArgumentError("rho, gamma and xi must be > 0")
    if n_neg < 1:
        raise InvalidArgumentError("n_neg must be >= 1")
    f, fp = data_of(F), data_of(Fp)
    q = Q.positions if isinstance(Q, KeypointSet) else np.asarray(Q, dtype=np.float64)
    qp = Qp.positions if isinstance(Qp, KeypointSet) else np.asarray(Qp, dtype=np.float64)
    if len(f) != len(q) or len(fp) != len(qp):
        raise InvalidArgumentError("one descriptor per keypoint is required")
    s = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if len(s) != len(f):
        raise InvalidArgumentError("one sigma per anchor is required")
    mapped = G.compose(Gp.inverse()).apply(qp)
    dist = np.linalg.norm(q[:, None, :] - mapped[None, :, :], axis=-1)
    rng = np.random.default_rng(seed)
    plan = []
    for m in range(len(f)):
        pos = int(np.argmin(dist[m]))
        if dist[m, pos] >= rho:
            continue
        negs = mine_negatives(dist[m], rho, n_neg, rng)
        if len(negs):
            plan.append((m, pos, negs))
    skipped = len(f) - len(plan)
    g, gp = np.zeros_like(f), np.zeros_like(fp)
    if not plan:
        info = TripletInfo(np.zeros(len(f)), skipped, False, 0)
        return _strong_result(0.0, F, g, Fp, gp), info
    kept = np.array([m for m, _, _ in plan])
    w_kept, zero = sigma_weights(s[kept], xi)
    if zero:
        log.warning("all triplet weights vanished (every sigma >= xi)")
    weights = np.zeros(len(f))
    weights[kept] = w_kept
    value, active = 0.0, 0
    for (m, i, negs), wm in zip(plan, w_kept):
        if wm == 0:
            continue
        dp, up = _dist_grad(f[m], fp[i])
        scale = wm / len(negs)
        for j in negs:
            dn, un = _dist_grad(f[m], fp[j])
            h = dp - dn + gamma
            if h <= 0:
                continue
            active += 1
            value += scale * h
            g[m] += scale * (up - un)
            gp[i] -= scale * up
            gp[j] += scale * un
    return _strong_result(value, F, g, Fp, gp), TripletInfo(weights, skipped, zero, active)


def _strong_result(value, F, g, Fp, gp):
    grads = [(F, g), (Fp, gp)]
    if any(isinstance(v, Value) for v, _ in grads):
        return scalar_op(value, grads)
    return float(value)


@dataclass
class DescriptorTrainConfig:
    steps: int = 200
    lr: float = 1e-3
    gamma: float = 0.2
    rho_fraction: float = 0.05  # positive radius as a fraction of cloud diameter
    xi: float = 1.0
    n_neg: int = 2
    seed: int = 0
    desc: DescriptorConfig = field(default_factory=DescriptorConfig)


def train_descriptor(pairs: Sequence, detector, cfg: DescriptorTrainConfig = DescriptorTrainConfig(),
                     params: Optional[ParamStore] = None) -> tuple[ParamStore, list]:
    """Strongly supervised training on ``(X, X~, T)`` pairs (X~ = T∘X).

    With poses G = I and G' = T the positive rule maps the second cloud's
    keypoints back by T⁻¹. Returns the parameters and the per-step losses.
    """
    if not pairs:
        raise InvalidArgumentError("no training pairs")
    params = params or init_descriptor_params(cfg.desc, cfg.seed)
    detections = [(detector(X), detector(Xt)) for X, Xt, _ in pairs]
    losses = []
    for step in range(cfg.steps):
        k = step % len(pairs)
        X, Xt, T = pairs[k]
        ka, kb = detections[k]
        r = default_radius(X, cfg.desc)
        with ad.Tape() as tape:
            fa, _ = describe_value(X, ka, r, params, cfg.desc)
            fb, _ = describe_value(Xt, kb, r, params, cfg.desc)
            loss, _ = triplet_loss_strong(fa, ka, fb, kb, RigidTransform.identity(), T, cfg.gamma,
                                          cfg.rho_fraction * r / cfg.desc.radius_fraction, cfg.xi,
                                          ka.sigmas, [cfg.seed, step], cfg.n_neg)
        if isinstance(loss, Value):
            tape.backward(loss)
            losses.append(float(loss.data))
        else:
            losses.append(float(loss))
        ad.adam_step(params, cfg.lr)
    return params, losses
