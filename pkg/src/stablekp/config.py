"""Line-based ``key = value`` run configuration.

Blank lines and text after ``#`` are ignored. Unknown keys are an error, and
every run writes its fully resolved configuration next to its outputs so it
can be replayed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError, InvalidArgumentError
from .evaluation import PROFILE_EPSILON
from .fpn import FPNConfig
from .training import TrainConfig

# Sub-seeds are derived as ``seed ^ STAGE_SEEDS[stage]``.
STAGE_SEEDS = {
    "data": 0x0D47A,
    "pairs": 0x9A125,
    "train": 0x7EA1,
    "eval": 0xE7A1,
    "ransac": 0x4A5C,
    "descriptor": 0xDE5C,
    "degeneracy": 0xDE6E,
}


def stage_seed(seed: int, stage: str) -> int:
    return int(seed) ^ STAGE_SEEDS[stage]


def _int_tuple(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _str_tuple(text: str) -> tuple:
    return tuple(t for t in text.replace(",", " ").split())


def _opt_int(text: str) -> Optional[int]:
    return None if text.lower() in ("none", "") else int(text)


def _opt_float(text: str) -> Optional[float]:
    return None if text.lower() in ("none", "") else float(text)


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    out: str = "run"
    profile: str = "model"
    epsilon: Optional[float] = None
    seed: int = 0
    synthetic_count: int = 200
    synthetic_points: int = 1024
    synthetic_shapes: tuple = ("box", "l_bracket", "pyramid")
    # network
    M: int = 64
    K_points: int = 64
    K_nodes: int = 9
    widths1: tuple = (32, 64)
    widths2: tuple = (64, 64)
    widths_head: tuple = (64, 32, 4)
    sigma_floor: float = 1e-4
    sigma_init: float = 0.05
    # training
    pairs_per_cloud: int = 4
    epochs: int = 3
    max_steps: Optional[int] = 2000
    lr: float = 1e-3
    lam: float = 0.5
    loss_mode: str = "point"
    noise_fraction: float = 0.005
    rotation_mode: str = "full"
    translation_range: float = 1.0
    batch_size: int = 1
    normal_k: int = 8

    def __post_init__(self):
        if self.profile not in PROFILE_EPSILON:
            raise ConfigError(f"profile must be one of {sorted(PROFILE_EPSILON)}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        try:
            self.train_config().augmentation
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def resolved_epsilon(self) -> float:
        return PROFILE_EPSILON[self.profile] if self.epsilon is None else float(self.epsilon)

    def fpn_config(self) -> FPNConfig:
        return FPNConfig(M=self.M, K_points=self.K_points, K_nodes=self.K_nodes,
                         widths1=self.widths1, widths2=self.widths2, widths_head=self.widths_head,
                         sigma_floor=self.sigma_floor, sigma_init=self.sigma_init)

    def train_config(self) -> TrainConfig:
        return TrainConfig(pairs_per_cloud=self.pairs_per_cloud, epochs=self.epochs,
                           max_steps=self.max_steps, lr=self.lr, lam=self.lam,
                           loss_mode=self.loss_mode, noise_fraction=self.noise_fraction,
                           rotation_mode=self.rotation_mode,
                           translation_range=self.translation_range, batch_size=self.batch_size,
                           normal_k=self.normal_k, seed=stage_seed(self.seed, "train"),
                           fpn=self.fpn_config())

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        lines.append(f"# epsilon in effect: {self.resolved_epsilon!r}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "resolved.cfg"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PARSERS = {
    "data": str, "out": str, "profile": str, "epsilon": _opt_float, "seed": int,
    "synthetic_count": int, "synthetic_points": int, "synthetic_shapes": _str_tuple,
    "M": int, "K_points": int, "K_nodes": int, "widths1": _int_tuple, "widths2": _int_tuple,
    "widths_head": _int_tuple, "sigma_floor": float, "sigma_init": float,
    "pairs_per_cloud": int, "epochs": int, "max_steps": _opt_int, "lr": float, "lam": float,
    "loss_mode": str, "noise_fraction": float, "rotation_mode": str,
    "translation_range": float, "batch_size": int, "normal_k": int,
}
assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            parsed = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        if isinstance(parsed, float) and not math.isfinite(parsed):
            raise ConfigError(f"line {lineno}: {key} must be finite")
        values[key] = parsed
    return replace(base or RunConfig(), **values)


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    cfg = parse_config(Path(path).read_text())
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg
