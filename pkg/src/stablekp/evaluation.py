"""Repeatability, robustness sweeps, matching, RANSAC registration and metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InsufficientDataError, InvalidArgumentError
from .fpn import KeypointSet, propose, select_top
from .geometry import (PointCloud, RigidTransform, add_gaussian_noise, as_cloud, kabsch_align,
                       random_downsample, rotation_angle_deg)
from .io import sigma_colors, write_ply
from .losses import nearest

PROFILE_EPSILON = {"lidar": 0.5, "rgbd": 0.1, "model": 0.03}
SUCCESS_RTE = 2.0
SUCCESS_RRE = 5.0
SWEEP_KINDS = ("noise", "downsample")

Detector = Callable[[PointCloud], KeypointSet]


def _kp_array(x) -> np.ndarray:
    if isinstance(x, KeypointSet):
        return x.positions
    if isinstance(x, PointCloud):
        return x.points
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgumentError(f"expected an (n, 3) array, got {arr.shape}")
    return arr


def repeatability(Q, Qt, T: RigidTransform, eps: float) -> float:
    """Fraction of Q whose image under T lies strictly within eps of some point of Qt."""
    if not eps > 0:
        raise InvalidArgumentError("epsilon must be > 0")
    q, qt = _kp_array(Q), _kp_array(Qt)
    if len(q) == 0 or len(qt) == 0:
        raise InvalidArgumentError("keypoint sets must be nonempty")
    moved = T.apply(q)
    d = np.linalg.norm(moved - qt[nearest(moved, qt)], axis=1)
    return float(np.count_nonzero(d < eps) / len(q))


def repeatability_both(Q, Qt, T: RigidTransform, eps: float) -> tuple[float, float]:
    """Forward and reverse direction of the protocol."""
    return repeatability(Q, Qt, T, eps), repeatability(Qt, Q, T.inverse(), eps)


def fpn_detector(params, cfg, seed: int = 0) -> Detector:
    return lambda cloud: propose(cloud, params, cfg, seed)


def random_detector(M: int, seed=0) -> Detector:
    """Baseline: M distinct input points drawn uniformly, all with sigma 1.

    The draw depends only on ``seed`` and the cloud size, never on geometry.
    """
    def detect(cloud):
        pc = as_cloud(cloud)
        if len(pc) < M:
            raise InvalidArgumentError(f"cloud has {len(pc)} points, fewer than M={M}")
        rng = np.random.default_rng([*np.atleast_1d(seed).astype(int).tolist(), len(pc)])
        idx = rng.choice(len(pc), size=M, replace=False)
        return KeypointSet(pc.points[idx], np.ones(M))
    return detect


def _top(kps: KeypointSet, n: Optional[int]) -> KeypointSet:
    return kps if n is None else select_top(kps, n)


@dataclass
class RepeatabilityReport:
    epsilon: float
    keypoint_counts: list
    relative_repeatability: list
    baseline: list

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.keypoint_counts, self.keypoint_counts[1:])):
            raise InvalidArgumentError("keypoint counts must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("n_keypoints", "repeatability", "baseline"))
        for n, r, b in zip(self.keypoint_counts, self.relative_repeatability, self.baseline):
            w.writerow([n, repr(r), repr(b)])
        return buf.getvalue()


def repeatability_report(detector: Detector, pairs: Sequence, counts: Sequence[int], eps: float,
                         baseline_seed: int = 0) -> RepeatabilityReport:
    """Mean repeatability over ``(X, X~, T)`` pairs for each keypoint count.

    The baseline draws exactly ``n`` random points from each cloud of a pair,
    with independent draws for the two sides.
    """
    counts = [int(c) for c in counts]
    if not pairs:
        raise InvalidArgumentError("no evaluation pairs")
    detections = [(detector(X), detector(Xt), T) for X, Xt, T in pairs]
    ours, base = [], []
    for n in counts:
        ours.append(float(np.mean([repeatability(select_top(a, n), select_top(b, n), T, eps)
                                   for a, b, T in detections])))
        vals = []
        for k, (X, Xt, T) in enumerate(pairs):
            ra = random_detector(n, [baseline_seed, k, 0])(X)
            rb = random_detector(n, [baseline_seed, k, 1])(Xt)
            vals.append(repeatability(ra, rb, T, eps))
        base.append(float(np.mean(vals)))
    return RepeatabilityReport(float(eps), counts, ours, base)


@dataclass
class SweepRow:
    level: float
    repeatability: float
    baseline: float
    available: bool = True


def _perturb(cloud: PointCloud, kind: str, level, seed) -> PointCloud:
    if kind == "noise":
        return add_gaussian_noise(cloud, float(level), seed)
    factor = int(level)
    if factor != level:
        raise InvalidArgumentError("downsample levels must be integers")
    return random_downsample(cloud, factor, seed)


def robustness_sweep(detector: Detector, pairs: Sequence, kind: str, levels: Sequence,
                     n_keypoints: Optional[int] = 128, eps: float = 0.03, seed: int = 0,
                     min_points: int = 1) -> list[SweepRow]:
    """Perturb the second cloud of every pair at each level and re-measure repeatability.

    A level whose perturbed clouds fall below ``min_points`` (or that the
    detector rejects) is reported with ``available=False`` and NaN values.
    """
    if kind not in SWEEP_KINDS:
        raise InvalidArgumentError(f"kind must be one of {SWEEP_KINDS}")
    if len(levels) == 0:
        raise InvalidArgumentError("levels must be nonempty")
    if not pairs:
        raise InvalidArgumentError("no evaluation pairs")
    rows = []
    first = [_top(detector(X), n_keypoints) for X, _, _ in pairs]
    for level in levels:
        ours, base = [], []
        try:
            for k, (X, Xt, T) in enumerate(pairs):
                pert = _perturb(as_cloud(Xt), kind, level, [seed, k])
                if len(pert) < min_points:
                    raise InvalidArgumentError("perturbed cloud too small")
                kb = _top(detector(pert), n_keypoints)
                ours.append(repeatability(first[k], kb, T, eps))
                n = len(first[k])
                ra = random_detector(n, [seed, k, 0])(X)
                rb = random_detector(n, [seed, k, 1])(pert)
                base.append(repeatability(ra, rb, T, eps))
        except InvalidArgumentError:
            rows.append(SweepRow(float(level), float("nan"), float("nan"), False))
            continue
        rows.append(SweepRow(float(level), float(np.mean(ours)), float(np.mean(base))))
    return rows


def sweep_rows_csv(rows: Sequence[SweepRow], kind: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((kind, "repeatability", "baseline", "available"))
    for r in rows:
        w.writerow([repr(r.level), repr(r.repeatability), repr(r.baseline), int(r.available)])
    return buf.getvalue()


def match(F_a, F_b, mutual: bool = False) -> np.ndarray:
    """Nearest-neighbour descriptor correspondences as an (n, 2) index array."""
    a = np.asarray(F_a, dtype=np.float64)
    b = np.asarray(F_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise InvalidArgumentError("descriptor sets must be nonempty 2-D arrays")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError("descriptor dimensions differ")
    j = _nearest_rows(a, b)
    i = np.arange(len(a))
    if mutual:
        back = _nearest_rows(b, a)
        keep = back[j] == i
        i, j = i[keep], j[keep]
    return np.stack([i, j], axis=1)


def _nearest_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :]
    return np.argmin(d2, axis=1)


@dataclass
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray
    iterations: int
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


def ransac_register(src, dst, iters: int = 1000, threshold: float = 0.1, seed=0,
                    max_refits: int = 10) -> RansacResult:
    """Rigid T with T∘src ≈ dst from putative correspondences ``src[k] ↔ dst[k]``.

    Minimal 3-point samples are fitted with Kabsch; the model with the most
    inliers (earliest on ties) is refitted on its inliers until the set stops
    changing. The returned mask is evaluated under the returned transform.
    """
    P = _kp_array(src)
    Q = _kp_array(dst)
    if P.shape != Q.shape:
        raise InvalidArgumentError("correspondence arrays differ in shape")
    if len(P) < 3:
        raise InsufficientDataError("ransac needs at least 3 correspondences")
    if iters < 1 or not threshold > 0:
        raise InvalidArgumentError("need iters >= 1 and threshold > 0")
    rng = np.random.default_rng(seed)
    best, best_count = None, -1
    for _ in range(iters):
        sample = rng.choice(len(P), size=3, replace=False)
        try:
            T = kabsch_align(P[sample], Q[sample])
        except DegenerateGeometryError:
            continue
        count = int(np.count_nonzero(np.linalg.norm(T.apply(P) - Q, axis=1) < threshold))
        if count > best_count:
            best, best_count = T, count
    if best is None:
        raise DegenerateGeometryError("every minimal sample was degenerate")
    T = best
    mask = np.linalg.norm(T.apply(P) - Q, axis=1) < threshold
    for _ in range(max_refits):
        if mask.sum() < 3:
            break
        try:
            refit = kabsch_align(P[mask], Q[mask])
        except DegenerateGeometryError:
            break
        new_mask = np.linalg.norm(refit.apply(P) - Q, axis=1) < threshold
        if new_mask.sum() < mask.sum():
            break
        T = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    res = np.linalg.norm(T.apply(P) - Q, axis=1)
    return RansacResult(T, res < threshold, int(iters), res)


def registration_metrics(T_est: RigidTransform, T_gt: RigidTransform) -> tuple[float, float, bool]:
    """(RTE, RRE in degrees, success) with success iff RTE < 2 and RRE < 5."""
    rte = float(np.linalg.norm(T_est.translation - T_gt.translation))
    rre = rotation_angle_deg(T_gt.rotation.T @ T_est.rotation)
    return rte, rre, bool(rte < SUCCESS_RTE and rre < SUCCESS_RRE)


@dataclass
class RegistrationReport:
    failure_rate: float
    inlier_ratio: float
    rte_mean: float
    rte_std: float
    rre_mean: float
    rre_std: float
    ransac_iterations: int
    n_pairs: int

    FIELDS = ("n_pairs", "failure_rate", "inlier_ratio", "rte_mean", "rte_std",
              "rre_mean", "rre_std", "ransac_iterations")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        w.writerow([getattr(self, f) if isinstance(getattr(self, f), int) else repr(getattr(self, f))
                    for f in self.FIELDS])
        return buf.getvalue()


@dataclass
class PairRegistration:
    transform: RigidTransform
    rte: float
    rre: float
    success: bool
    inlier_ratio: float
    n_matches: int


def register_pair(kps_a: KeypointSet, F_a, kps_b: KeypointSet, F_b, T_gt: RigidTransform,
                  iters: int = 1000, threshold: float = 0.1, seed=0,
                  mutual: bool = False) -> PairRegistration:
    """Match descriptors, run RANSAC, and score against the ground truth.

    The inlier ratio counts matches whose ground-truth residual is below
    ``threshold``.
    """
    corr = match(F_a, F_b, mutual)
    P = kps_a.positions[corr[:, 0]]
    Q = kps_b.positions[corr[:, 1]]
    ratio = float(np.mean(np.linalg.norm(T_gt.apply(P) - Q, axis=1) < threshold)) if len(P) else 0.0
    try:
        T = ransac_register(P, Q, iters, threshold, seed).transform
    except (InsufficientDataError, DegenerateGeometryError):
        T = RigidTransform.identity()
    rte, rre, ok = registration_metrics(T, T_gt)
    return PairRegistration(T, rte, rre, ok, ratio, len(P))


def summarize_registration(results: Sequence[PairRegistration], iters: int) -> RegistrationReport:
    """Failure rate over all pairs; RTE/RRE statistics over the successful ones."""
    if not results:
        raise InvalidArgumentError("no registration results")
    ok = [r for r in results if r.success]
    rte = np.array([r.rte for r in ok])
    rre = np.array([r.rre for r in ok])
    stat = lambda a, fn: float(fn(a)) if len(a) else float("nan")
    return RegistrationReport(
        failure_rate=1.0 - len(ok) / len(results),
        inlier_ratio=float(np.mean([r.inlier_ratio for r in results])),
        rte_mean=stat(rte, np.mean), rte_std=stat(rte, np.std),
        rre_mean=stat(rre, np.mean), rre_std=stat(rre, np.std),
        ransac_iterations=int(iters), n_pairs=len(results))


def write_keypoints_ply(path, kps: KeypointSet, cloud: Optional[PointCloud] = None) -> None:
    """Keypoints red-scaled by sigma; the optional cloud is appended in grey."""
    pts = kps.positions
    colors = sigma_colors(kps.sigmas)
    if cloud is not None:
        pc = as_cloud(cloud)
        pts = np.vstack([pts, pc.points])
        colors = np.vstack([colors, np.full((len(pc), 3), 160, dtype=np.int64)])
    write_ply(path, pts, colors=colors)
