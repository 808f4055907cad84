"""Feature proposal network: keypoints and saliency uncertainties from a point cloud.

Pipeline per forward pass:

1. farthest point sampling picks M nodes;
2. every point joins its nearest node and is expressed relative to it;
3. a shared per-point MLP + max-pool gives one local feature per node;
4. each node max-pools an MLP over its K nearest nodes' (feature, relative position);
5. a head MLP predicts an offset from the node and a raw uncertainty.

Only relative coordinates enter the networks, so the output is translation
equivariant by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .errors import InvalidArgumentError
from .geometry import as_cloud, fps_sample, point_to_node_group


@dataclass(frozen=True)
class FPNConfig:
    M: int = 64
    K_points: int = 64
    K_nodes: int = 9
    widths1: tuple = (32, 64)
    widths2: tuple = (64, 64)
    widths_head: tuple = (64, 32, 4)
    sigma_floor: float = 1e-4
    sigma_init: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "widths1", tuple(int(w) for w in self.widths1))
        object.__setattr__(self, "widths2", tuple(int(w) for w in self.widths2))
        object.__setattr__(self, "widths_head", tuple(int(w) for w in self.widths_head))
        if self.M < 4:
            raise InvalidArgumentError("M must be >= 4")
        if not 1 <= self.K_nodes <= self.M:
            raise InvalidArgumentError("K_nodes must be in [1, M]")
        if self.K_points < 1:
            raise InvalidArgumentError("K_points must be >= 1")
        if min(self.widths1 + self.widths2 + self.widths_head, default=0) < 1:
            raise InvalidArgumentError("all layer widths must be >= 1")
        if not (self.widths1 and self.widths2 and self.widths_head):
            raise InvalidArgumentError("every sub-network needs at least one layer")
        if self.widths_head[-1] != 4:
            raise InvalidArgumentError("the head must end in 4 outputs (offset xyz + raw sigma)")
        if not self.sigma_floor > 0 or not self.sigma_init > self.sigma_floor:
            raise InvalidArgumentError("need 0 < sigma_floor < sigma_init")

    def to_meta(self) -> dict:
        return {
            "M": np.asarray(float(self.M)), "K_points": np.asarray(float(self.K_points)),
            "K_nodes": np.asarray(float(self.K_nodes)),
            "widths1": np.asarray(self.widths1, dtype=float),
            "widths2": np.asarray(self.widths2, dtype=float),
            "widths_head": np.asarray(self.widths_head, dtype=float),
            "sigma_floor": np.asarray(self.sigma_floor), "sigma_init": np.asarray(self.sigma_init),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "FPNConfig":
        ints = lambda a: tuple(int(round(v)) for v in np.atleast_1d(a))
        return cls(M=int(meta["M"]), K_points=int(meta["K_points"]), K_nodes=int(meta["K_nodes"]),
                   widths1=ints(meta["widths1"]), widths2=ints(meta["widths2"]),
                   widths_head=ints(meta["widths_head"]), sigma_floor=float(meta["sigma_floor"]),
                   sigma_init=float(meta.get("sigma_init", 0.05)))


@dataclass(frozen=True, eq=False)
class KeypointSet:
    positions: np.ndarray
    sigmas: np.ndarray
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        sig = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if len(pos) != len(sig):
            raise InvalidArgumentError("positions and sigmas differ in length")
        if not np.all(np.isfinite(pos)):
            raise InvalidArgumentError("keypoint positions must be finite")
        if not np.all(sig > 0):
            raise InvalidArgumentError("sigmas must be positive")
        idx = np.arange(len(pos)) if self.index is None else np.asarray(self.index, dtype=np.int64)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "sigmas", sig)
        object.__setattr__(self, "index", idx)

    def __len__(self):
        return len(self.positions)

    def take(self, rows) -> "KeypointSet":
        rows = np.asarray(rows, dtype=np.int64)
        return KeypointSet(self.positions[rows], self.sigmas[rows], self.index[rows])


def _mlp_params(store: ParamStore, prefix: str, n_in: int, widths, rng, last_scale=1.0):
    for li, w in enumerate(widths):
        std = np.sqrt(2.0 / n_in)
        if li == len(widths) - 1:
            std *= last_scale
        store.add(f"{prefix}.{li}.W", rng.normal(0.0, std, size=(w, n_in)))
        store.add(f"{prefix}.{li}.b", np.zeros(w))
        n_in = w


def init_params(cfg: FPNConfig, seed: int = 0) -> ParamStore:
    """He-initialised weights, zero biases; the sigma bias starts at ``sigma_init``."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    _mlp_params(store, "local", 3, cfg.widths1, rng)
    _mlp_params(store, "context", cfg.widths1[-1] + 3, cfg.widths2, rng)
    _mlp_params(store, "head", cfg.widths2[-1], cfg.widths_head, rng, last_scale=0.1)
    last = len(cfg.widths_head) - 1
    b = store[f"head.{last}.b"]
    target = cfg.sigma_init - cfg.sigma_floor
    b.data[3] = target + np.log(-np.expm1(-target))  # inverse softplus
    store.meta.update(cfg.to_meta())
    return store


def mlp(x, store: ParamStore, prefix: str, n_layers: int, final_relu: bool = True):
    for li in range(n_layers):
        x = ad.dense(x, store[f"{prefix}.{li}.W"], store[f"{prefix}.{li}.b"])
        if final_relu or li < n_layers - 1:
            x = ad.relu(x)
    return x


def node_neighbors(nodes: np.ndarray, k: int) -> np.ndarray:
    """k nearest nodes of every node (itself first), ties by lowest index."""
    d2 = ((nodes[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=-1)
    cols = np.broadcast_to(np.arange(len(nodes)), d2.shape)
    order = np.lexsort((cols, d2), axis=-1)
    return order[:, :k]


def _cluster_table(assignment: np.ndarray, M: int, cap: int, rng: np.random.Generator):
    """Padded (M, width) table of member indices plus a mask of non-empty nodes.

    Clusters larger than ``cap`` are uniformly subsampled; shorter rows are padded
    by repeating their first member, which leaves a max-pool unchanged.
    """
    order = np.argsort(assignment, kind="stable")
    sizes = np.bincount(assignment, minlength=M)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    width = max(1, min(cap, int(sizes.max())))
    table = np.zeros((M, width), dtype=np.int64)
    for m in range(M):
        members = order[starts[m]:starts[m] + sizes[m]]
        if len(members) > cap:
            members = np.sort(rng.choice(members, size=cap, replace=False))
        if len(members) == 0:
            continue
        table[m, :len(members)] = members
        table[m, len(members):] = members[0]
    return table, sizes > 0


@dataclass(eq=False)
class Proposal:
    """Differentiable proposal output plus the discrete choices that produced it."""

    positions: Value
    sigmas: Value
    nodes: np.ndarray
    node_indices: np.ndarray
    empty_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def keypoints(self) -> KeypointSet:
        return KeypointSet(self.positions.data.copy(), self.sigmas.data.copy())


def forward(cloud, params: ParamStore, cfg: FPNConfig, seed: int = 0) -> Proposal:
    pts = as_cloud(cloud).points
    if len(pts) < cfg.M:
        raise InvalidArgumentError(f"cloud has {len(pts)} points, fewer than M={cfg.M}")
    nodes, node_idx = fps_sample(pts, cfg.M, seed)
    grouping = point_to_node_group(pts, nodes)
    rng = np.random.default_rng([abs(int(seed)), 0x9A7])
    table, filled = _cluster_table(grouping.assignment, cfg.M, cfg.K_points, rng)
    local_in = grouping.normalized_offsets[table]  # (M, width, 3)
    feat = mlp(Value(local_in), params, "local", len(cfg.widths1))
    G = ad.set_maxpool(feat, axis=1)
    if not filled.all():
        G = G * filled[:, None].astype(np.float64)

    nbr = node_neighbors(nodes, cfg.K_nodes)
    rel = nodes[nbr] - nodes[:, None, :]
    ctx_in = ad.concat([ad.gather(G, nbr), Value(rel)], axis=-1)
    H = ad.set_maxpool(mlp(ctx_in, params, "context", len(cfg.widths2)), axis=1)

    out = mlp(H, params, "head", len(cfg.widths_head), final_relu=False)
    offsets = out[:, 0:3]
    sigmas = ad.softplus(out[:, 3]) + cfg.sigma_floor
    positions = offsets + nodes
    return Proposal(positions, sigmas, nodes, node_idx, np.flatnonzero(~filled))


def propose(cloud, params: ParamStore, cfg: FPNConfig, seed: int = 0) -> KeypointSet:
    """M keypoints and uncertainties (plain arrays; use :func:`forward` on a tape for gradients)."""
    return forward(cloud, params, cfg, seed).keypoints()


def nms_filter(kps: KeypointSet, radius: float, sigma_threshold: float = np.inf) -> KeypointSet:
    """Drop σ > threshold, then keep greedily by increasing σ, suppressing within ``radius``.

    Survivors are returned in their original order.
    """
    if radius < 0:
        raise InvalidArgumentError("radius must be >= 0")
    cand = np.flatnonzero(kps.sigmas <= sigma_threshold)
    cand = cand[np.lexsort((kps.index[cand], kps.sigmas[cand]))]
    kept: list[int] = []
    r2 = radius * radius
    for c in cand:
        if radius > 0 and kept:
            d2 = ((kps.positions[kept] - kps.positions[c]) ** 2).sum(axis=1)
            if np.any(d2 <= r2):
                continue
        kept.append(int(c))
    return kps.take(np.sort(np.asarray(kept, dtype=np.int64)))


def select_top(kps: KeypointSet, n: int) -> KeypointSet:
    """The ``n`` lowest-σ keypoints (ties by index), sorted by σ."""
    if not 0 <= n <= len(kps):
        raise InvalidArgumentError(f"cannot select {n} of {len(kps)} keypoints")
    order = np.lexsort((kps.index, kps.sigmas))[:n]
    return kps.take(order)


def fpn_config_from_store(store: ParamStore) -> FPNConfig:
    if "M" not in store.meta:
        raise InvalidArgumentError("checkpoint has no network configuration")
    return FPNConfig.from_meta(store.meta)
