"""Command-line entry point: ``stablekp <command> ...``.

Exit codes: 0 ok, 1 check failed, 2 usage/config, 3 I/O, 4 invalid argument,
5 training diverged. Errors are reported as one line on stderr::

    error kind=<kind> exit=<code> message=<text>

Every numeric result is also written to stdout as CSV.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checks, degeneracy, descriptor, evaluation, synthetic, training
from .config import RunConfig, load_config, stage_seed
from .errors import ConfigError, StableKPError
from .fpn import fpn_config_from_store, nms_filter, propose, select_top
from .geometry import (PointCloud, RigidTransform, add_gaussian_noise, apply_transform, random_se3)
from .io import MalformedFileError, read_cloud, write_cloud, write_xyz

log = logging.getLogger("stablekp")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_IO, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5
PAIR_HEADER = ("source", "target", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22",
               "tx", "ty", "tz")
CLOUD_SUFFIXES = (".xyz", ".ply")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _emit(text: str, out: Optional[Path] = None) -> None:
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    sys.stdout.write(text)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a comma-separated number list, got {text!r}") from None


def _cloud_paths(spec: str) -> list[Path]:
    """A directory (all .xyz/.ply files, sorted), or a comma-separated file list."""
    p = Path(spec)
    if p.is_dir():
        paths = sorted(q for q in p.iterdir() if q.suffix.lower() in CLOUD_SUFFIXES)
        if not paths:
            raise FileNotFoundError(f"no .xyz/.ply files in {spec}")
        return paths
    paths = [Path(s.strip()) for s in spec.split(",") if s.strip()]
    for q in paths:
        if not q.is_file():
            raise FileNotFoundError(f"cloud file not found: {q}")
    return paths


def _load_params(path: str) -> ad.ParamStore:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return ad.load_checkpoint(path)


def read_pairs(path) -> list[tuple[PointCloud, PointCloud, RigidTransform, str, str]]:
    """Pairs manifest: source, target, row-major R, t; paths relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pairs manifest not found: {path}")
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PAIR_HEADER:
            raise MalformedFileError(f"{path}: header must be {','.join(PAIR_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(PAIR_HEADER):
                raise MalformedFileError(f"{path}:{lineno}: expected {len(PAIR_HEADER)} fields")
            try:
                vals = np.array([float(v) for v in row[2:]])
            except ValueError as exc:
                raise MalformedFileError(f"{path}:{lineno}: {exc}") from None
            T = RigidTransform(vals[:9].reshape(3, 3), vals[9:])
            src = path.parent / row[0]
            dst = path.parent / row[1]
            out.append((read_cloud(src), read_cloud(dst), T, row[0], row[1]))
    if not out:
        raise MalformedFileError(f"{path}: no pairs")
    return out


def write_pairs(path, rows: Sequence[tuple[str, str, RigidTransform]]) -> str:
    data = [(s, t, *T.rotation.reshape(-1), *T.translation) for s, t, T in rows]
    text = _csv(data, PAIR_HEADER)
    Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = stage_seed(args.seed, "data")
    files, labels = [], []
    for i in range(args.count):
        cloud, corners = synthetic.gen_synthetic(args.shape, args.points, args.jitter, [base, i],
                                                 args.diameter)
        name = f"{args.shape}_{i:04d}.xyz"
        write_xyz(out / name, cloud)
        files.append((name, len(cloud), len(corners)))
        labels += [(name, k, *c) for k, c in enumerate(corners)]
    (out / "labels.csv").write_text(_csv(labels, ("file", "corner", "x", "y", "z")))
    _emit(_csv(files, ("file", "n_points", "n_corners")), out / "files.csv")
    return EXIT_OK


def cmd_gen_pairs(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(stage_seed(args.seed, "pairs"))
    rows = []
    for src in _cloud_paths(args.inputs):
        cloud = read_cloud(src)
        T = random_se3(args.rotation, args.translation, rng)
        moved = cloud
        if args.noise > 0:
            moved = add_gaussian_noise(cloud, args.noise, rng.integers(2**63))
        moved = apply_transform(moved, T)
        src_name = f"{src.stem}_src{src.suffix}"
        dst_name = f"{src.stem}_dst{src.suffix}"
        write_cloud(out / src_name, cloud)
        write_cloud(out / dst_name, moved)
        rows.append((src_name, dst_name, T))
    _emit(write_pairs(out / "pairs.csv", rows))
    return EXIT_OK


def _dataset(cfg: RunConfig) -> list[PointCloud]:
    if cfg.data:
        return [read_cloud(p) for p in _cloud_paths(cfg.data)]
    return synthetic.make_corpus(cfg.synthetic_count, cfg.synthetic_shapes, cfg.synthetic_points,
                                 0.0, stage_seed(cfg.seed, "data"))


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out=args.out)
    out = Path(cfg.out)
    cfg.write(out)
    params = _load_params(args.resume) if args.resume else None
    result = training.train(_dataset(cfg), cfg.train_config(), out, params)
    _emit(result.curve_csv())
    return EXIT_OK


def cmd_detect(args) -> int:
    params = _load_params(args.checkpoint)
    fcfg = fpn_config_from_store(params)
    cloud = read_cloud(args.inputs)
    kps = propose(cloud, params, fcfg, args.seed)
    kps = nms_filter(kps, args.nms_radius, args.sigma_max)
    if args.n is not None:
        kps = select_top(kps, min(args.n, len(kps)) if args.clip else args.n)
    rows = [(int(i), *p, s) for i, p, s in zip(kps.index, kps.positions, kps.sigmas)]
    text = _csv(rows, ("index", "x", "y", "z", "sigma"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".ply":
        evaluation.write_keypoints_ply(out, kps, cloud if args.with_cloud else None)
        sys.stdout.write(text)
    else:
        _emit(text, out)
    return EXIT_OK


def _epsilon(args) -> float:
    if args.epsilon is not None:
        if not args.epsilon > 0:
            raise UsageError("--epsilon must be > 0")
        return args.epsilon
    return evaluation.PROFILE_EPSILON[args.profile]


def cmd_eval_rep(args) -> int:
    params = _load_params(args.checkpoint)
    fcfg = fpn_config_from_store(params)
    pairs = [(X, Xt, T) for X, Xt, T, _, _ in read_pairs(args.pairs)]
    det = evaluation.fpn_detector(params, fcfg, args.seed)
    eps = _epsilon(args)
    out = Path(args.out) if args.out else None
    if args.sweep:
        levels = _float_list(args.levels)
        n = args.n if args.n is not None else min(128, fcfg.M)
        rows = evaluation.robustness_sweep(det, pairs, args.sweep, levels, n, eps,
                                           stage_seed(args.seed, "eval"), min_points=fcfg.M)
        _emit(evaluation.sweep_rows_csv(rows, args.sweep), out)
        return EXIT_OK
    counts = [c for c in _int_list(args.counts) if c <= fcfg.M]
    if not counts:
        raise UsageError(f"no keypoint count <= M={fcfg.M}")
    report = evaluation.repeatability_report(det, pairs, counts, eps, stage_seed(args.seed, "eval"))
    _emit(report.to_csv(), out)
    return EXIT_OK


def cmd_eval_reg(args) -> int:
    params = _load_params(args.checkpoint)
    fcfg = fpn_config_from_store(params)
    pairs = [(X, Xt, T) for X, Xt, T, _, _ in read_pairs(args.pairs)]
    det = evaluation.fpn_detector(params, fcfg, args.seed)
    dcfg = descriptor.DescriptorConfig()
    if args.descriptor:
        dparams = _load_params(args.descriptor)
    else:
        dparams = descriptor.init_descriptor_params(dcfg, stage_seed(args.seed, "descriptor"))
        if args.desc_steps > 0:
            tcfg = descriptor.DescriptorTrainConfig(steps=args.desc_steps,
                                                    seed=stage_seed(args.seed, "descriptor"))
            dparams, _ = descriptor.train_descriptor(pairs, det, tcfg, dparams)
    results = []
    for k, (X, Xt, T) in enumerate(pairs):
        ka, kb = det(X), det(Xt)
        if args.n is not None:
            ka, kb = select_top(ka, min(args.n, len(ka))), select_top(kb, min(args.n, len(kb)))
        r = descriptor.default_radius(X, dcfg)
        fa = descriptor.describe(X, ka, r, dparams, dcfg).vectors
        fb = descriptor.describe(Xt, kb, r, dparams, dcfg).vectors
        results.append(evaluation.register_pair(ka, fa, kb, fb, T, args.iters, args.inlier_thresh,
                                                [stage_seed(args.seed, "ransac"), k], args.mutual))
    report = evaluation.summarize_registration(results, args.iters)
    _emit(report.to_csv(), Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_degeneracy(args) -> int:
    if args.sweep:
        if not args.config:
            raise UsageError("--sweep needs --config")
        cfg = load_config(args.config)
        if args.out:
            cfg = replace(cfg, out=args.out)
        out = Path(cfg.out)
        cfg.write(out)
        corpus = _dataset(cfg)
        eval_clouds = synthetic.make_corpus(args.eval_count, cfg.synthetic_shapes,
                                            cfg.synthetic_points, 0.0,
                                            stage_seed(cfg.seed, "degeneracy"))
        trainer = lambda clouds, tcfg: training.train(clouds, tcfg).params
        cells = degeneracy.mk_sweep(trainer, cfg.train_config(), _int_list(args.M),
                                    _int_list(args.K), corpus, eval_clouds,
                                    epsilon=cfg.resolved_epsilon,
                                    seed=stage_seed(cfg.seed, "degeneracy"))
        _emit(degeneracy.sweep_csv(cells), out / "sweep.csv")
        return EXIT_OK
    if not args.checkpoint or not args.inputs:
        raise UsageError("degeneracy needs --checkpoint and --in, or --sweep")
    params = _load_params(args.checkpoint)
    fcfg = fpn_config_from_store(params)
    det = evaluation.fpn_detector(params, fcfg, args.seed)
    rows = []
    for path in _cloud_paths(args.inputs):
        cloud = read_cloud(path)
        try:
            v = degeneracy.classify(det(cloud), cloud, detector=det, trials=args.trials,
                                    seed=stage_seed(args.seed, "degeneracy"))
            rows.append((path.name, v.verdict, v.centroid_spread, v.axis_residual,
                         v.equivariance_residual))
        except degeneracy.IndeterminateError:
            rows.append((path.name, "indeterminate", math.nan, math.nan, math.nan))
    _emit(_csv(rows, ("file", "verdict", "centroid_spread", "axis_residual",
                      "equivariance_residual")), Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rows = checks.run_scope(args.scope, args.instances, args.seed)
    table = [(name, err, n, kinks, tol, err < tol) for name, err, n, kinks, tol in rows]
    _emit(_csv(table, ("check", "max_rel_error", "n_checked", "kinks", "tolerance", "pass")),
          Path(args.out) if args.out else None)
    return EXIT_OK if all(r[-1] for r in table) else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stablekp", description="Unsupervised 3D keypoint detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="sample synthetic shapes to XYZ files")
    g.add_argument("--shape", required=True, choices=synthetic.SHAPES)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--points", type=int, default=1024)
    g.add_argument("--jitter", type=float, default=0.0)
    g.add_argument("--diameter", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gen-pairs", help="write randomly transformed copies and a pairs manifest")
    g.add_argument("--in", dest="inputs", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--rotation", choices=("none", "planar", "full"), default="full")
    g.add_argument("--translation", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_pairs)

    g = sub.add_parser("train", help="train a detector from a config file")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.add_argument("--resume")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("detect", help="detect keypoints in one cloud")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--in", dest="inputs", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--clip", action="store_true", help="cap --n at the number available")
    g.add_argument("--nms-radius", type=float, default=0.0)
    g.add_argument("--sigma-max", type=float, default=math.inf)
    g.add_argument("--with-cloud", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_detect)

    for name, func, help_ in (("eval-rep", cmd_eval_rep, "relative repeatability on a pairs manifest"),
                              ("eval-reg", cmd_eval_reg, "RANSAC registration on a pairs manifest")):
        g = sub.add_parser(name, help=help_)
        g.add_argument("--checkpoint", required=True)
        g.add_argument("--pairs", required=True)
        g.add_argument("--seed", type=int, default=0)
        g.add_argument("--out")
        g.add_argument("--n", type=int)
        g.set_defaults(func=func)
        if name == "eval-rep":
            g.add_argument("--epsilon", type=float)
            g.add_argument("--profile", choices=sorted(evaluation.PROFILE_EPSILON), default="model")
            g.add_argument("--counts", default="4,8,16,32,64")
            g.add_argument("--sweep", choices=evaluation.SWEEP_KINDS)
            g.add_argument("--levels", default="0")
        else:
            g.add_argument("--iters", type=int, default=1000)
            g.add_argument("--inlier-thresh", type=float, default=0.05)
            g.add_argument("--descriptor")
            g.add_argument("--desc-steps", type=int, default=0)
            g.add_argument("--mutual", action="store_true")

    g = sub.add_parser("degeneracy", help="classify detector outputs or run an M/K sweep")
    g.add_argument("--checkpoint")
    g.add_argument("--in", dest="inputs")
    g.add_argument("--trials", type=int, default=3)
    g.add_argument("--sweep", action="store_true")
    g.add_argument("--config")
    g.add_argument("--M", default="64")
    g.add_argument("--K", default="9,24,64")
    g.add_argument("--eval-count", type=int, default=30)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_degeneracy)

    g = sub.add_parser("grad-check", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=checks.SCOPES, default="all")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_grad_check)
    return p


def _fail(kind: str, code: int, message: str) -> int:
    text = " ".join(str(message).split())
    sys.stderr.write(f"error kind={kind} exit={code} message={text}\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except StableKPError as exc:
        return _fail(exc.kind, exc.exit_code, exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail("io", EXIT_IO, exc)
    except OSError as exc:
        return _fail("io", EXIT_IO, f"{exc.__class__.__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
