"""Point-cloud primitives: sampling, neighborhoods, normals, rigid transforms, augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, InvalidArgumentError

ROTATION_MODES = ("none", "planar", "full")


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgumentError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points in a shared metric frame, optionally with unit normals."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _as_points(self.points)
        if len(pts) < 1:
            raise InvalidArgumentError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals)
            if nrm.shape != pts.shape:
                raise InvalidArgumentError("normals must match points in shape")
            if not np.all(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) <= 1e-9):
                raise InvalidArgumentError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def radius(self) -> float:
        """Largest distance from the centroid to a point."""
        return float(np.sqrt(((self.points - self.centroid()) ** 2).sum(axis=1).max()))

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm)


def as_cloud(cloud) -> PointCloud:
    return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("transform has non-finite entries")
        # loose check so transforms parsed from text or composed many times still load
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidArgumentError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat) -> "RigidTransform":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points) -> np.ndarray:
        return _as_points(points) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class AugmentationSpec:
    noise_sigma: float = 0.0
    downsample_factor: int = 1
    rotation_mode: str = "full"
    translation_range: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if int(self.downsample_factor) != self.downsample_factor or self.downsample_factor < 1:
            raise InvalidArgumentError("downsample_factor must be an integer >= 1")
        if self.rotation_mode not in ROTATION_MODES:
            raise InvalidArgumentError(f"rotation_mode must be one of {ROTATION_MODES}")
        if self.translation_range < 0:
            raise InvalidArgumentError("translation_range must be >= 0")


@dataclass(frozen=True, eq=False)
class NodeGrouping:
    nodes: np.ndarray
    assignment: np.ndarray
    normalized_offsets: np.ndarray
    # rounding error of each offset, so that nodes + offsets + residual == points exactly
    offset_residual: Optional[np.ndarray] = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def members(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == node)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_nodes)

    @property
    def empty_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.group_sizes() == 0)

    def reconstruct(self) -> np.ndarray:
        """Original points; bit-exact when ``offset_residual`` is present."""
        anchors = self.nodes[self.assignment]
        if self.offset_residual is None:
            return self.normalized_offsets + anchors
        terms = zip(anchors.ravel(), self.normalized_offsets.ravel(), self.offset_residual.ravel())
        return np.array([math.fsum(t) for t in terms]).reshape(anchors.shape)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, (len(a), len(b))."""
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def fps_sample(cloud, M: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Farthest point sampling; returns (node positions, point indices).

    The start point is the lowest-index point farthest from the centroid, shifted
    by ``seed`` positions (mod N). Ties are broken towards the lowest index.
    """
    pts = as_cloud(cloud).points
    N = len(pts)
    if not 1 <= M <= N:
        raise InvalidArgumentError(f"cannot sample M={M} nodes from {N} points")
    d_centroid = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
    start = (int(np.argmax(d_centroid)) + int(seed)) % N
    idx = np.empty(M, dtype=np.int64)
    idx[0] = start
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    mind[start] = -1.0
    for i in range(1, M):
        j = int(np.argmax(mind))
        idx[i] = j
        np.minimum(mind, ((pts - pts[j]) ** 2).sum(axis=1), out=mind)
        mind[idx[: i + 1]] = -1.0
    return pts[idx].copy(), idx


class NeighborIndex:
    """Exact k-nearest / radius search over a fixed point set.

    Backed by a kd-tree; candidate sets are re-ranked with explicitly computed
    squared distances so ties resolve to the lowest index, matching brute force.
    """

    def __init__(self, cloud):
        self.points = as_cloud(cloud).points
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (indices, squared distances), both (Q, k)."""
        q = _as_points(queries)
        N = len(self.points)
        if not 1 <= k <= N:
            raise InvalidArgumentError(f"k={k} must be in [1, {N}]")
        kk = min(k + 1, N)
        _, cand = self.tree.query(q, k=kk)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), kk)
        d2 = ((q[:, None, :] - self.points[cand]) ** 2).sum(axis=-1)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        out_idx = cand[:, :k].copy()
        out_d2 = d2[:, :k].copy()
        if kk > k:
            unsafe = ~(d2[:, k] > d2[:, k - 1] * (1.0 + 1e-9) + 1e-300)
            for row in np.flatnonzero(unsafe):
                r = np.sqrt(d2[row, k - 1]) * (1.0 + 1e-9) + 1e-150
                ball = np.asarray(self.tree.query_ball_point(q[row], r), dtype=np.int64)
                bd2 = ((self.points[ball] - q[row]) ** 2).sum(axis=-1)
                o = np.lexsort((ball, bd2))[:k]
                out_idx[row] = ball[o]
                out_d2[row] = bd2[o]
        return out_idx, out_d2

    def radius(self, query, r: float) -> np.ndarray:
        """Indices within distance ``r`` of one query, sorted by (distance, index)."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        ball = np.asarray(self.tree.query_ball_point(q, r * (1.0 + 1e-12)), dtype=np.int64)
        if len(ball) == 0:
            return ball
        d2 = ((self.points[ball] - q) ** 2).sum(axis=-1)
        keep = d2 <= r * r
        ball, d2 = ball[keep], d2[keep]
        return ball[np.lexsort((ball, d2))]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest index and Euclidean distance per query."""
        idx, d2 = self.knn(queries, 1)
        return idx[:, 0], np.sqrt(d2[:, 0])


def knn_search(queries, cloud, k: int) -> np.ndarray:
    """Per-query k nearest indices, sorted by distance then index."""
    return NeighborIndex(cloud).knn(queries, k)[0]


def _two_diff(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (d, e) with d = fl(a - b) and d + e = a - b exactly (Knuth TwoSum)."""
    d = a - b
    bb = a - d
    e = (a - (d + bb)) + (bb - b)
    return d, e


def point_to_node_group(cloud, nodes) -> NodeGrouping:
    """Assign every point to its nearest node (lowest node index on ties)."""
    pts = as_cloud(cloud).points
    S = _as_points(nodes)
    if len(S) < 1:
        raise InvalidArgumentError("need at least one node")
    owner = np.argmin(_sqdist(pts, S), axis=1).astype(np.int64)
    off, err = _two_diff(pts, S[owner])
    return NodeGrouping(S.copy(), owner, off, err)


def estimate_normals(cloud, k: int = 8, return_flags: bool = False):
    """PCA normals from k-neighborhoods, oriented away from the cloud centroid.

    Neighborhoods whose covariance has rank < 2 get normal (0, 0, 1) and are
    flagged; pass ``return_flags=True`` to receive the flag mask as well.
    """
    pc = as_cloud(cloud)
    pts = pc.points
    N = len(pts)
    if k < 3 or k > N:
        raise InvalidArgumentError(f"k={k} must satisfy 3 <= k <= N={N}")
    idx, _ = NeighborIndex(pc).knn(pts, k)
    nb = pts[idx]
    c_nb = nb.mean(axis=1)
    centered = nb - c_nb[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 0.0)
    rank = (evals > 1e-10 * scale[:, None]).sum(axis=1)
    rank[scale <= 0] = 0
    degenerate = rank < 2

    outward = c_nb - pts.mean(axis=0)
    dot = (normals * outward).sum(axis=1)
    tol = 1e-12 * (np.linalg.norm(outward, axis=1) + np.sqrt(scale) + 1e-300)
    flip = np.where(np.abs(dot) <= tol, normals[:, 2] < 0, dot < 0)
    normals[flip] *= -1.0
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = PointCloud(pts, normals)
    return (out, degenerate) if return_flags else out


def apply_transform(cloud, T: RigidTransform) -> PointCloud:
    pc = as_cloud(cloud)
    nrm = None
    if pc.normals is not None:
        nrm = pc.normals @ T.rotation.T
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(T.apply(pc.points), nrm)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "none":
        return np.eye(3)
    if mode == "planar":
        return rotation_z(rng.uniform(0.0, 2.0 * np.pi))
    if mode == "full":
        # Shoemake's uniform unit quaternion
        u1, u2, u3 = rng.uniform(size=3)
        a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
        q = (b * np.cos(2 * np.pi * u3), a * np.sin(2 * np.pi * u2),
             a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3))
        return quaternion_to_matrix(q)
    raise InvalidArgumentError(f"unknown rotation mode {mode!r}")


def random_se3(mode: str = "full", translation_range: float = 0.0, seed=None) -> RigidTransform:
    if translation_range < 0:
        raise InvalidArgumentError("translation_range must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    R = random_rotation(mode, rng)
    t = rng.uniform(-translation_range, translation_range, size=3)
    return RigidTransform(R, t)


def add_gaussian_noise(cloud, sigma: float, seed=None) -> PointCloud:
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    pc = as_cloud(cloud)
    if sigma == 0:
        return PointCloud(pc.points.copy(), pc.normals)
    rng = np.random.default_rng(seed)
    return PointCloud(pc.points + rng.normal(0.0, sigma, size=pc.points.shape), pc.normals)


def random_downsample(cloud, factor: int, seed=None) -> PointCloud:
    pc = as_cloud(cloud)
    if factor < 1:
        raise InvalidArgumentError("downsample factor must be >= 1")
    keep = len(pc) // int(factor)
    if keep < 1:
        raise InvalidArgumentError(f"downsampling {len(pc)} points by {factor} leaves none")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(pc), size=keep, replace=False))
    return pc.subset(idx)


def augment(cloud, spec: AugmentationSpec, seed=None) -> tuple[PointCloud, RigidTransform]:
    """Downsample, add noise, then apply a random rigid transform."""
    rng = np.random.default_rng(seed)
    pc = as_cloud(cloud)
    if spec.downsample_factor > 1:
        pc = random_downsample(pc, spec.downsample_factor, rng.integers(2**63))
    if spec.noise_sigma > 0:
        pc = add_gaussian_noise(pc, spec.noise_sigma, rng.integers(2**63))
    T = random_se3(spec.rotation_mode, spec.translation_range, rng)
    return apply_transform(pc, T), T


def kabsch_align(P, Q) -> RigidTransform:
    """Least-squares rigid transform T with T∘P ≈ Q (no reflections)."""
    P = _as_points(P)
    Q = _as_points(Q)
    if P.shape != Q.shape:
        raise InvalidArgumentError("point sets must have equal size")
    if len(P) < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")
    p0, q0 = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - p0, Q - q0
    sv = np.linalg.svd(Pc, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")
    U, _, Vt = np.linalg.svd(Pc.T @ Qc)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, q0 - R @ p0)


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    R = np.asarray(R, dtype=np.float64)
    cos_part = (np.trace(R) - 1.0) / 2.0
    sin_part = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(sin_part, np.clip(cos_part, -1.0, 1.0))))
