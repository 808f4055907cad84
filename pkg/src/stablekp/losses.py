"""Training losses with analytic gradients.

Every loss accepts plain arrays or :class:`~stablekp.autodiff.Value` inputs. With
Values on an active tape the result is a scalar Value whose backward pass uses
the closed-form gradients below; nearest-neighbour matches are held fixed during
backward. With plain arrays a float is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .autodiff import Value, data_of, scalar_op
from .errors import InvalidArgumentError
from .geometry import PointCloud

DEFAULT_LAMBDA = 0.5
LOSS_MODES = ("point", "plane")


@dataclass
class LossBreakdown:
    total: float
    chamfer_term: float
    point_term: float = 0.0
    lam: float = 0.0
    d_ij: np.ndarray = field(default_factory=lambda: np.zeros(0))
    d_ji: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma_ij: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma_ji: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _points(x, what: str) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    arr = data_of(x)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgumentError(f"{what} must be an (n, 3) array, got {arr.shape}")
    if len(arr) == 0:
        raise InvalidArgumentError(f"{what} is empty")
    return arr


def nearest(queries: np.ndarray, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the nearest point for each query (lowest index on ties), brute force."""
    out = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
        out[s:s + chunk] = np.argmin(d2, axis=1)
    return out


def _finish(value: float, grads):
    if any(isinstance(v, Value) for v, _ in grads):
        return scalar_op(value, grads)
    return float(value)


def chamfer_loss(Q, Qp):
    """Sum of squared nearest-neighbour distances in both directions."""
    q, qp = _points(Q, "Q"), _points(Qp, "Q'")
    j = nearest(q, qp)
    i = nearest(qp, q)
    diff_ij = q - qp[j]
    diff_ji = qp - q[i]
    value = (diff_ij ** 2).sum() + (diff_ji ** 2).sum()
    gq = 2.0 * diff_ij
    np.add.at(gq, i, -2.0 * diff_ji)
    gqp = 2.0 * diff_ji
    np.add.at(gqp, j, -2.0 * diff_ij)
    return _finish(value, [(Q, gq), (Qp, gqp)])


def _sigmas(s, n: int, what: str) -> np.ndarray:
    arr = data_of(s).reshape(-1)
    if len(arr) != n:
        raise InvalidArgumentError(f"{what} has {len(arr)} entries, expected {n}")
    if not np.all(arr > 0):
        raise InvalidArgumentError(f"{what} must be strictly positive")
    return arr


def _unit(diff: np.ndarray, d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(diff)
    nz = d > 0
    out[nz] = diff[nz] / d[nz, None]
    return out


def prob_chamfer_loss(Q, S, Qp, Sp):
    """Negative log-likelihood of nearest-neighbour distances under exponential models.

    Returns ``(loss, LossBreakdown)``. Distances are Euclidean (not squared) and
    each direction uses its own matches; the pair rate is the mean of the two
    sigmas involved.
    """
    q, qp = _points(Q, "Q"), _points(Qp, "Q'")
    s = _sigmas(S, len(q), "sigma")
    sp = _sigmas(Sp, len(qp), "sigma'")

    j = nearest(q, qp)
    diff_ij = q - qp[j]
    d_ij = np.sqrt((diff_ij ** 2).sum(axis=1))
    s_ij = 0.5 * (s + sp[j])

    i = nearest(qp, q)
    diff_ji = qp - q[i]
    d_ji = np.sqrt((diff_ji ** 2).sum(axis=1))
    s_ji = 0.5 * (sp + s[i])

    value = (np.log(s_ij) + d_ij / s_ij).sum() + (np.log(s_ji) + d_ji / s_ji).sum()

    gq = np.zeros_like(q)
    gqp = np.zeros_like(qp)
    dir_ij = _unit(diff_ij, d_ij) / s_ij[:, None]
    gq += dir_ij
    np.add.at(gqp, j, -dir_ij)
    dir_ji = _unit(diff_ji, d_ji) / s_ji[:, None]
    gqp += dir_ji
    np.add.at(gq, i, -dir_ji)

    ds_ij = 0.5 * (1.0 / s_ij - d_ij / s_ij ** 2)
    ds_ji = 0.5 * (1.0 / s_ji - d_ji / s_ji ** 2)
    gs = ds_ij.copy()
    np.add.at(gs, i, ds_ji)
    gsp = ds_ji.copy()
    np.add.at(gsp, j, ds_ij)

    shape_s = data_of(S).shape
    shape_sp = data_of(Sp).shape
    loss = _finish(value, [(Q, gq), (Qp, gqp), (S, gs.reshape(shape_s)), (Sp, gsp.reshape(shape_sp))])
    breakdown = LossBreakdown(total=float(value), chamfer_term=float(value), d_ij=d_ij, d_ji=d_ji,
                              sigma_ij=s_ij, sigma_ji=s_ji)
    return loss, breakdown


def pair_nll(d: float, sigma: float) -> float:
    """Single-pair term ln σ + d/σ."""
    return float(np.log(sigma) + d / sigma)


def sigma_stationary(d: float) -> float:
    """Numerically locate the minimiser of ln σ + d/σ over σ > 0."""
    if not d > 0:
        raise InvalidArgumentError("d must be positive")
    # stationarity of u + d·exp(-u) in u = ln σ; the derivative is monotone in u
    u = brentq(lambda u: 1.0 - d * np.exp(-u), np.log(d) - 50.0, np.log(d) + 50.0,
               xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(np.exp(u))


def _cloud_points(X, what: str) -> np.ndarray:
    pts = X.points if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise InvalidArgumentError(f"{what} must be a nonempty (N, 3) cloud")
    return pts


def point_to_point_loss(Q, X, Qt, Xt):
    """Squared distance from each keypoint to its nearest cloud point, both clouds."""
    value = 0.0
    grads = []
    for kp, cloud, what in ((Q, X, "X"), (Qt, Xt, "X~")):
        q = _points(kp, "keypoints")
        pts = _cloud_points(cloud, what)
        diff = q - pts[nearest(q, pts)]
        value += (diff ** 2).sum()
        grads.append((kp, 2.0 * diff))
    return _finish(value, grads)


def point_to_plane_loss(Q, X, Qt, Xt):
    """Squared point-to-plane residual against the nearest point's normal, both clouds."""
    value = 0.0
    grads = []
    for kp, cloud, what in ((Q, X, "X"), (Qt, Xt, "X~")):
        if not isinstance(cloud, PointCloud) or cloud.normals is None:
            raise InvalidArgumentError(f"{what} needs normals for the point-to-plane loss")
        q = _points(kp, "keypoints")
        j = nearest(q, cloud.points)
        n = cloud.normals[j]
        r = ((q - cloud.points[j]) * n).sum(axis=1)
        value += (r ** 2).sum()
        grads.append((kp, 2.0 * r[:, None] * n))
    return _finish(value, grads)


def total_loss(Q, S, Qp, Sp, X, Xt, Qt, lam: float = DEFAULT_LAMBDA, mode: str = "point"):
    """Probabilistic chamfer plus λ times the keypoint-to-surface term.

    ``Qp``/``Sp`` are the proposals of the transformed cloud mapped back into the
    source frame; ``Qt`` are the same proposals in the transformed frame, used
    for the surface term against ``Xt``.
    """
    if lam < 0:
        raise InvalidArgumentError("lambda must be >= 0")
    if mode not in LOSS_MODES:
        raise InvalidArgumentError(f"loss mode must be one of {LOSS_MODES}")
    lc, bd = prob_chamfer_loss(Q, S, Qp, Sp)
    fn = point_to_point_loss if mode == "point" else point_to_plane_loss
    lp = fn(Q, X, Qt, Xt)
    total = lc + lam * lp
    bd.point_term = float(data_of(lp))
    bd.lam = float(lam)
    bd.total = float(data_of(total))
    return total, bd
