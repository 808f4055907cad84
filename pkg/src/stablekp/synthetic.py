"""Analytic solids sampled as point clouds, for desk-scale training and tests.

Each shape is a triangle mesh with a list of labelled corner points. Corner
labels are diagnostics only; nothing in training reads them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geometry import PointCloud

SHAPES = ("box", "l_bracket", "pyramid", "plane_with_bumps")
MIN_POINTS = 100


@dataclass(frozen=True, eq=False)
class SyntheticShape:
    kind: str
    vertices: np.ndarray
    faces: np.ndarray
    corners: np.ndarray

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        a, b, c = self.triangles.transpose(1, 0, 2)
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def sample(self, n_points: int, jitter: float = 0.0, seed=None):
        """Area-uniform surface samples; returns (points, face index per point)."""
        rng = np.random.default_rng(seed)
        areas = self.areas()
        face = rng.choice(len(areas), size=n_points, p=areas / areas.sum())
        r1 = np.sqrt(rng.uniform(size=n_points))[:, None]
        r2 = rng.uniform(size=n_points)[:, None]
        a, b, c = (self.triangles[face, k] for k in range(3))
        pts = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c
        if jitter > 0:
            pts = pts + rng.normal(0.0, jitter, size=pts.shape)
        return pts, face


def _quad(i, j, k, l):
    return [(i, j, k), (i, k, l)]


def _box(rng):
    ex = rng.uniform(0.35, 1.0, size=3)
    hx, hy, hz = ex / 2
    v = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    # vertex id = 4*ix + 2*iy + iz
    f = (_quad(0, 1, 3, 2) + _quad(4, 6, 7, 5) + _quad(0, 4, 5, 1)
         + _quad(2, 3, 7, 6) + _quad(0, 2, 6, 4) + _quad(1, 5, 7, 3))
    return v, np.array(f), v.copy()


def _pyramid(rng):
    w, d = rng.uniform(0.5, 1.0), rng.uniform(0.3, 0.8)
    h = rng.uniform(0.5, 1.0)
    v = np.array([[-w / 2, -d / 2, 0], [w / 2, -d / 2, 0], [w / 2, d / 2, 0], [-w / 2, d / 2, 0],
                  [rng.uniform(-0.1, 0.1) * w, rng.uniform(-0.1, 0.1) * d, h]])
    f = _quad(0, 3, 2, 1) + [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    return v, np.array(f), v.copy()


def _l_bracket(rng):
    a, b = rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.9)
    t1, t2 = rng.uniform(0.15, 0.3) * b, rng.uniform(0.15, 0.3) * a
    depth = rng.uniform(0.25, 0.6)
    outline = np.array([[0, 0], [a, 0], [a, t1], [t2, t1], [t2, b], [0, b]])
    bottom = np.column_stack([outline, np.zeros(6)])
    top = np.column_stack([outline, np.full(6, depth)])
    v = np.vstack([bottom, top])
    # the L outline is star-shaped from vertex 0, so a fan from it triangulates the face
    f = [(0, 2, 1), (0, 3, 2), (0, 4, 3), (0, 5, 4)]
    f += [(6 + i, 6 + j, 6 + k) for i, k, j in f]
    for i in range(6):
        j = (i + 1) % 6
        f += _quad(i, j, 6 + j, 6 + i)
    return v, np.array(f), v.copy()


def _plane_with_bumps(rng, grid: int = 40):
    n_bumps = int(rng.integers(2, 5))
    centers = rng.uniform(-0.3, 0.3, size=(n_bumps, 2))
    heights = rng.uniform(0.08, 0.2, size=n_bumps) * rng.choice([-1, 1], size=n_bumps)
    widths = rng.uniform(0.05, 0.1, size=n_bumps)
    lx, ly = 1.0, rng.uniform(0.6, 1.0)
    xs = np.linspace(-lx / 2, lx / 2, grid + 1)
    ys = np.linspace(-ly / 2, ly / 2, grid + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    def height(x, y):
        z = np.zeros_like(x)
        for (cx, cy), hh, ww in zip(centers, heights, widths):
            z = z + hh * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * ww * ww))
        return z

    v = np.column_stack([gx.ravel(), gy.ravel(), height(gx, gy).ravel()])
    vid = lambda i, j: i * (grid + 1) + j
    f = []
    for i in range(grid):
        for j in range(grid):
            f += _quad(vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1))
    corners = [v[vid(0, 0)], v[vid(grid, 0)], v[vid(grid, grid)], v[vid(0, grid)]]
    corners += [[cx, cy, height(np.array(cx), np.array(cy))] for cx, cy in centers]
    return v, np.array(f), np.asarray(corners, dtype=np.float64)


_BUILDERS = {"box": _box, "pyramid": _pyramid, "l_bracket": _l_bracket,
             "plane_with_bumps": _plane_with_bumps}


def _seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        # fresh copy: spawning mutates the sequence and would break repeatability
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


def _diameter(v: np.ndarray) -> float:
    return float(np.sqrt(((v[:, None, :] - v[None, :, :]) ** 2).sum(-1).max()))


def make_shape(kind: str, seed=None, diameter: float = 1.0) -> SyntheticShape:
    """Randomly proportioned instance of ``kind``, centred, scaled to ``diameter``."""
    if kind not in _BUILDERS:
        raise InvalidArgumentError(f"unknown shape {kind!r}; choose from {SHAPES}")
    rng = np.random.default_rng(seed)
    v, f, corners = _BUILDERS[kind](rng)
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    # the solids are polytopes, so the vertex set attains the diameter
    scale = diameter / _diameter(v)
    return SyntheticShape(kind, (v - center) * scale, f, (corners - center) * scale)


def gen_synthetic(shape: str, n_points: int, jitter: float = 0.0, seed=None,
                  diameter: float = 1.0) -> tuple[PointCloud, np.ndarray]:
    """Surface samples of a random instance of ``shape`` plus its labelled corners."""
    if n_points < MIN_POINTS:
        raise InvalidArgumentError(f"n_points must be >= {MIN_POINTS}")
    if jitter < 0:
        raise InvalidArgumentError("jitter must be >= 0")
    shape_seed, sample_seed = _seedseq(seed).spawn(2)
    s = make_shape(shape, shape_seed, diameter)
    pts, _ = s.sample(n_points, jitter, sample_seed)
    return PointCloud(pts), s.corners.copy()


def make_corpus(n: int, kinds=("box", "l_bracket", "pyramid"), n_points: int = 1024,
                jitter: float = 0.0, seed: int = 0) -> list[PointCloud]:
    """``n`` clouds cycling through ``kinds``, each a fresh random instance."""
    ss = _seedseq(seed).spawn(n)
    return [gen_synthetic(kinds[i % len(kinds)], n_points, jitter, ss[i])[0] for i in range(n)]


def make_resampled_pair(kind: str, n_points: int, seed=None, diameter: float = 1.0):
    """Two independent surface samplings of the same random shape instance."""
    shape_seed, a, b = _seedseq(seed).spawn(3)
    s = make_shape(kind, shape_seed, diameter)
    return PointCloud(s.sample(n_points, 0.0, a)[0]), PointCloud(s.sample(n_points, 0.0, b)[0]), s
