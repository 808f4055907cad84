"""Unsupervised training on randomly transformed copies of each cloud."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .errors import InvalidArgumentError, TrainingDivergedError
from .fpn import FPNConfig, forward, init_params
from .geometry import (AugmentationSpec, PointCloud, RigidTransform, add_gaussian_noise,
                       apply_transform, as_cloud, estimate_normals, random_se3)
from .losses import DEFAULT_LAMBDA, LOSS_MODES, LossBreakdown, total_loss

log = logging.getLogger(__name__)

CURVE_HEADER = ("step", "total", "chamfer", "point")


@dataclass(frozen=True, eq=False)
class TrainingPair:
    source: PointCloud
    transformed: PointCloud
    transform: RigidTransform


@dataclass(frozen=True)
class TrainConfig:
    pairs_per_cloud: int = 4
    epochs: int = 3
    max_steps: Optional[int] = 2000
    lr: float = 1e-3
    lam: float = DEFAULT_LAMBDA
    loss_mode: str = "point"
    noise_fraction: float = 0.005  # training noise sigma as a fraction of cloud diameter
    rotation_mode: str = "full"
    translation_range: float = 1.0
    batch_size: int = 1
    normal_k: int = 8
    seed: int = 0
    fpn: FPNConfig = field(default_factory=FPNConfig)

    def __post_init__(self):
        if self.pairs_per_cloud < 1:
            raise InvalidArgumentError("pairs_per_cloud must be >= 1")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise InvalidArgumentError("max_steps must be >= 1")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be > 0")
        if self.lam < 0:
            raise InvalidArgumentError("lam must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidArgumentError(f"loss_mode must be one of {LOSS_MODES}")
        if self.noise_fraction < 0:
            raise InvalidArgumentError("noise_fraction must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")

    @property
    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(0.0, 1, self.rotation_mode, self.translation_range)


def make_pairs(cloud, L: int, aug: AugmentationSpec, seed=None) -> list[TrainingPair]:
    """``L`` copies of ``cloud`` under independent random rigid transforms.

    Only the rotation mode and translation range of ``aug`` are used here;
    noise is applied per step by :func:`pair_gradients`, which keeps
    ``transformed == T ∘ source`` exact.
    """
    if L < 1:
        raise InvalidArgumentError("L must be >= 1")
    pc = as_cloud(cloud)
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(L):
        T = random_se3(aug.rotation_mode, aug.translation_range, rng)
        pairs.append(TrainingPair(pc, apply_transform(pc, T), T))
    return pairs


def cloud_diameter(cloud) -> float:
    pts = as_cloud(cloud).points
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def pair_loss(pair: TrainingPair, params: ParamStore, cfg: TrainConfig, seed=0):
    """Build the training objective for one pair on the active tape.

    Returns ``(loss Value, LossBreakdown)``. Both clouds get independent noise and
    their own farthest-point start, so the two node sets differ.
    """
    rng = np.random.default_rng(seed)
    src, dst = pair.source, pair.transformed
    sigma = cfg.noise_fraction * cloud_diameter(src)
    if sigma > 0:
        src = add_gaussian_noise(src, sigma, rng.integers(2**63))
        dst = add_gaussian_noise(dst, sigma, rng.integers(2**63))
    fps_a, fps_b = (int(s) for s in rng.integers(0, len(src), size=2))
    if cfg.loss_mode == "plane":
        src = estimate_normals(src, cfg.normal_k)
        dst = estimate_normals(dst, cfg.normal_k)
    pa = forward(src, params, cfg.fpn, fps_a)
    pb = forward(dst, params, cfg.fpn, fps_b)
    for name, prop in (("source", pa), ("transformed", pb)):
        if not (np.all(np.isfinite(prop.positions.data)) and np.all(np.isfinite(prop.sigmas.data))):
            raise TrainingDivergedError(f"non-finite proposals on the {name} cloud")
    T_inv = pair.transform.inverse()
    back = ad.affine(pb.positions, T_inv.rotation, T_inv.translation)
    return total_loss(pa.positions, pa.sigmas, back, pb.sigmas, src, dst, pb.positions,
                      cfg.lam, cfg.loss_mode)


def _check_finite(bd: LossBreakdown) -> None:
    for name, val in (("chamfer", bd.chamfer_term), ("point", bd.point_term), ("total", bd.total)):
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite {name} loss term ({val})")


def pair_gradients(pair: TrainingPair, params: ParamStore, cfg: TrainConfig, seed=0) -> LossBreakdown:
    """Forward + backward for one pair; gradients accumulate into ``params``."""
    with ad.Tape() as tape:
        loss, bd = pair_loss(pair, params, cfg, seed)
    _check_finite(bd)
    tape.backward(loss)
    return bd


def train_step(pair: TrainingPair, params: ParamStore, cfg: TrainConfig, seed=0) -> LossBreakdown:
    """One optimizer step on one pair."""
    bd = pair_gradients(pair, params, cfg, seed)
    ad.adam_step(params, cfg.lr)
    return bd


@dataclass
class TrainResult:
    params: ParamStore
    curve: list = field(default_factory=list)  # (step, total, chamfer, point)

    def curve_csv(self) -> str:
        return curve_to_csv(self.curve)


def curve_to_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for step, tot, ch, pt in curve:
        w.writerow([step, repr(float(tot)), repr(float(ch)), repr(float(pt))])
    return buf.getvalue()


def schedule(n_clouds: int, cfg: TrainConfig):
    """Yield (step, cloud index, pair-set seed, pair index) in training order."""
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(n_clouds)
        for ci in order:
            for l in range(cfg.pairs_per_cloud):
                yield step, int(ci), (cfg.seed, epoch, int(ci)), l
                step += 1


def train(dataset: Sequence, cfg: TrainConfig, out_dir=None, params: Optional[ParamStore] = None,
          callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> TrainResult:
    """Run the pair loop; optionally write ``checkpoint.bin`` and ``loss.csv`` to ``out_dir``.

    Passing ``params`` loaded from a checkpoint resumes after the optimizer step
    it was saved at, replaying the same schedule.
    """
    clouds = [as_cloud(c) for c in dataset]
    if not clouds:
        raise InvalidArgumentError("empty dataset")
    for c in clouds:
        if len(c) < cfg.fpn.M:
            raise InvalidArgumentError(f"a cloud has {len(c)} points, fewer than M={cfg.fpn.M}")
    if params is None:
        params = init_params(cfg.fpn, cfg.seed)
    start = params.step * cfg.batch_size
    result = TrainResult(params)
    pair_cache: dict = {}
    pending = 0
    for step, ci, pair_seed, l in schedule(len(clouds), cfg):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        if step < start:
            continue
        if pair_seed not in pair_cache:
            pair_cache.clear()
            pair_cache[pair_seed] = make_pairs(clouds[ci], cfg.pairs_per_cloud, cfg.augmentation,
                                               np.random.SeedSequence(pair_seed))
        pair = pair_cache[pair_seed][l]
        bd = pair_gradients(pair, params, cfg, np.random.SeedSequence([cfg.seed, step, 2]))
        pending += 1
        if pending == cfg.batch_size:
            if cfg.batch_size > 1:
                params.scale_grads(1.0 / cfg.batch_size)
            ad.adam_step(params, cfg.lr)
            pending = 0
        result.curve.append((step, bd.total, bd.chamfer_term, bd.point_term))
        if callback is not None:
            callback(step, bd)
        if step % 100 == 0:
            log.info("step %d total=%.4f chamfer=%.4f point=%.4f", step, bd.total,
                     bd.chamfer_term, bd.point_term)
    params.zero_grad()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(out / "checkpoint.bin", params)
        (out / "loss.csv").write_text(result.curve_csv())
    return result
