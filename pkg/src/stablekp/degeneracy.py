"""Detection of the two trivial equivariant solutions: centroid and principal axis.

Both satisfy f(R·Y ⊕ t) = R·f(Y) ⊕ t for every rigid motion, exactly like an
ideal detector, so the equivariance residual alone cannot tell them apart from
a good detector. :func:`classify` looks at the geometry of the output instead.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import IndeterminateError, InvalidArgumentError, StableKPError
from .fpn import KeypointSet, propose
from .geometry import PointCloud, apply_transform, as_cloud, random_se3
from .losses import nearest

TAU_CENTROID = 0.05
TAU_AXIS = 0.05
VERDICTS = ("none", "centroid", "principal_axis")
SWEEP_HEADER = ("M", "K", "verdict", "centroid_spread", "axis_residual",
                "equivariance_residual", "repeatability")


@dataclass
class DegeneracyVerdict:
    verdict: str
    centroid_spread: float
    axis_residual: float
    axis_spread: float = 0.0
    equivariance_residual: Optional[float] = None


def _positions(out) -> np.ndarray:
    if isinstance(out, KeypointSet):
        return out.positions
    return np.asarray(out, dtype=np.float64).reshape(-1, 3)


def principal_axes(cloud, rel_gap: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Covariance eigenvalues (descending) and eigenvectors (columns).

    Raises IndeterminateError when the covariance has rank < 2 or two
    eigenvalues coincide, since the axes are then not unique.
    """
    pts = as_cloud(cloud).points
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    top = evals[0]
    if top <= 0 or evals[1] <= 1e-12 * top:
        raise IndeterminateError("cloud covariance has rank < 2")
    gaps = np.abs(np.diff(evals))
    if np.any(gaps <= rel_gap * top):
        raise IndeterminateError("cloud covariance has repeated eigenvalues")
    return evals, evecs


def centroid_detector(M: int = 8) -> Callable:
    """Detector that outputs M copies of the cloud centroid."""
    def detect(cloud):
        return np.repeat(as_cloud(cloud).centroid()[None, :], M, axis=0)
    return detect


def principal_axis_detector(coeffs=(-1.0, -0.5, 0.5, 1.0), axis: int = 0) -> Callable:
    """Detector placing points at centroid + c·U along one principal axis.

    The axis sign is fixed by the third moment of the projections, which turns
    with the cloud; coefficient sets symmetric about 0 are sign-free anyway.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)

    def detect(cloud):
        pts = as_cloud(cloud).points
        c = pts.mean(axis=0)
        _, U = principal_axes(pts)
        u = U[:, axis]
        if np.mean(((pts - c) @ u) ** 3) < 0:
            u = -u
        return c + coeffs[:, None] * u
    return detect


def set_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Mean nearest-neighbour distance, averaged over both directions."""
    da = np.linalg.norm(A - B[nearest(A, B)], axis=1)
    db = np.linalg.norm(B - A[nearest(B, A)], axis=1)
    return 0.5 * (da.mean() + db.mean())


def equivariance_residual(detector: Callable, cloud, trials: int = 10, seed=0,
                          translation_range: float = 1.0) -> float:
    """Mean of chamfer(detector(T∘Y), T∘detector(Y)) / radius over random T."""
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    pc = as_cloud(cloud)
    radius = pc.radius()
    base = _positions(detector(pc))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        T = random_se3("full", translation_range, rng)
        moved = _positions(detector(apply_transform(pc, T)))
        out.append(set_distance(moved, T.apply(base)) / radius)
    return float(np.mean(out))


def classify(kps, cloud, tau_c: float = TAU_CENTROID, tau_a: float = TAU_AXIS,
             detector: Optional[Callable] = None, trials: int = 5, seed=0) -> DegeneracyVerdict:
    """Label keypoints as centroid-collapsed, principal-axis-collapsed, or neither."""
    Q = _positions(kps)
    if len(Q) < 4:
        raise InvalidArgumentError("need at least 4 keypoints to classify")
    pc = as_cloud(cloud)
    c = pc.centroid()
    r = pc.radius()
    pts = pc.points - c
    cov = pts.T @ pts / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] <= 0 or evals[1] <= 1e-12 * evals[2]:
        raise IndeterminateError("cloud covariance has rank < 2")
    rel = Q - c
    spread = float(np.linalg.norm(rel, axis=1).max() / r)
    best = (np.inf, 0.0, 0)
    for k in range(3):
        u = evecs[:, k]
        proj = rel @ u
        perp = rel - proj[:, None] * u
        rms = float(np.sqrt((perp ** 2).sum(axis=1).mean()) / r)
        if rms < best[0]:
            best = (rms, float((proj.max() - proj.min()) / r), k)
    axis_res, axis_spread, k_best = best
    eq = None if detector is None else equivariance_residual(detector, pc, trials, seed)
    if spread < tau_c:
        verdict = "centroid"
    elif axis_res < tau_a and axis_spread > tau_c:
        gaps = np.abs(evals[k_best] - np.delete(evals, k_best))
        if np.any(gaps <= 1e-6 * evals[2]):
            raise IndeterminateError("best-fit axis lies in a repeated eigenspace")
        verdict = "principal_axis"
    else:
        verdict = "none"
    return DegeneracyVerdict(verdict, spread, axis_res, axis_spread, eq)


@dataclass
class SweepCell:
    M: int
    K: int
    verdict: str
    centroid_spread: float = float("nan")
    axis_residual: float = float("nan")
    equivariance_residual: float = float("nan")
    repeatability: float = float("nan")
    fractions: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def degenerate_fraction(self) -> float:
        return self.fractions.get("centroid", 0.0) + self.fractions.get("principal_axis", 0.0)


def _pair_repeatability(kps_a, kps_b, T, eps) -> float:
    q = T.apply(kps_a.positions)
    d = np.linalg.norm(q - kps_b.positions[nearest(q, kps_b.positions)], axis=1)
    return float(np.mean(d < eps))


def mk_sweep(trainer: Callable, base_cfg, M_values: Sequence[int], K_values: Sequence[int],
             cloud_corpus: Sequence, eval_clouds: Optional[Sequence] = None,
             eval_pairs: Optional[Sequence] = None, epsilon: float = 0.03,
             equivariance_trials: int = 2, seed: int = 0) -> list[SweepCell]:
    """Train one detector per (M, K) and classify its outputs.

    ``trainer(corpus, cfg) -> ParamStore``. Cells whose training fails record the
    error and carry on. ``eval_pairs`` are ``(X, X~, T)`` triples used for the
    repeatability column (all M keypoints).
    """
    if not M_values or not K_values:
        raise InvalidArgumentError("empty sweep grid")
    eval_clouds = list(eval_clouds if eval_clouds is not None else cloud_corpus)
    cells = []
    for M in sorted(M_values):
        for K in sorted(K_values):
            try:
                cfg = replace(base_cfg, fpn=replace(base_cfg.fpn, M=int(M), K_nodes=int(K)))
                params = trainer(cloud_corpus, cfg)
                verdicts = []
                for cloud in eval_clouds:
                    try:
                        verdicts.append(classify(propose(cloud, params, cfg.fpn), cloud))
                    except IndeterminateError:
                        continue  # symmetric cloud: no verdict, excluded from the fractions
                if not verdicts:
                    raise IndeterminateError("every evaluation cloud was indeterminate")
                counts = Counter(v.verdict for v in verdicts)
                fractions = {name: counts.get(name, 0) / len(verdicts) for name in VERDICTS}
                verdict = max(VERDICTS, key=lambda n: (counts.get(n, 0), -VERDICTS.index(n)))
                detector = lambda c, p=params, f=cfg.fpn: propose(c, p, f)
                eq = float(np.mean([equivariance_residual(detector, c, equivariance_trials, seed)
                                    for c in eval_clouds[:3]]))
                rep = float("nan")
                if eval_pairs:
                    rep = float(np.mean([
                        _pair_repeatability(propose(X, params, cfg.fpn), propose(Xt, params, cfg.fpn),
                                            T, epsilon) for X, Xt, T in eval_pairs]))
                cells.append(SweepCell(
                    int(M), int(K), verdict,
                    float(np.median([v.centroid_spread for v in verdicts])),
                    float(np.median([v.axis_residual for v in verdicts])),
                    eq, rep, fractions))
            except StableKPError as exc:
                cells.append(SweepCell(int(M), int(K), "error", error=str(exc)))
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for c in cells:
        w.writerow([c.M, c.K, c.verdict, repr(c.centroid_spread), repr(c.axis_residual),
                    repr(c.equivariance_residual), repr(c.repeatability)])
    return buf.getvalue()
