import csv
import io
from pathlib import Path

import numpy as np
import pytest

from stablekp.cli import main, read_pairs
from stablekp.io import read_cloud

TINY = """\
M = 16
K_points = 16
K_nodes = 4
widths1 = 16, 16
widths2 = 16, 16
widths_head = 16, 4
synthetic_count = 4
synthetic_points = 256
epochs = 1
max_steps = 8
seed = {seed}
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY.format(seed=1))
    assert main(["gen-data", "--shape", "box", "--count", "3", "--points", "300",
                 "--seed", "4", "--out", str(root / "data")]) == 0
    assert main(["gen-pairs", "--in", str(root / "data"), "--out", str(root / "pairs"),
                 "--seed", "2"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_files(workspace):
    data = workspace / "data"
    clouds = sorted(data.glob("*.xyz"))
    assert len(clouds) == 3
    labels = list(csv.DictReader(open(data / "labels.csv")))
    files = list(csv.DictReader(open(data / "files.csv")))
    assert len(files) == 3 and all(int(f["n_points"]) == 300 for f in files)
    assert len(labels) == 3 * 8
    pc = read_cloud(clouds[0])
    assert len(pc) == 300


def test_xyz_round_trip_lossless(workspace, tmp_path):
    src = sorted((workspace / "data").glob("*.xyz"))[0]
    pc = read_cloud(src)
    assert pc.points.dtype == np.float64
    from stablekp.io import write_xyz
    write_xyz(tmp_path / "copy.xyz", pc)
    assert np.array_equal(read_cloud(tmp_path / "copy.xyz").points, pc.points)


def test_pairs_manifest(workspace):
    pairs = read_pairs(workspace / "pairs" / "pairs.csv")
    assert len(pairs) == 3
    for X, Xt, T, _, _ in pairs:
        assert np.abs(T.apply(X.points) - Xt.points).max() < 1e-9


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "checkpoint.bin").exists()
    assert (run_dir / "resolved.cfg").exists()
    lines = (run_dir / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,total,chamfer,point" and len(lines) == 9


def test_detect_csv_and_ply(workspace, capsys):
    cloud = sorted((workspace / "data").glob("*.xyz"))[0]
    ck = workspace / "run" / "checkpoint.bin"
    code, out, _ = run(capsys, "detect", "--checkpoint", ck, "--in", cloud,
                       "--out", workspace / "kp.csv", "--n", 8)
    assert code == 0 and len(out.splitlines()) == 9
    assert (workspace / "kp.csv").read_text() == out
    code, out2, _ = run(capsys, "detect", "--checkpoint", ck, "--in", cloud,
                        "--out", workspace / "kp.ply", "--n", 8, "--with-cloud")
    assert code == 0 and out2 == out and len(read_cloud(workspace / "kp.ply")) == 308


def test_detect_too_many_keypoints(workspace, capsys):
    cloud = sorted((workspace / "data").glob("*.xyz"))[0]
    target = workspace / "none.csv"
    code, _, err = run(capsys, "detect", "--checkpoint", workspace / "run" / "checkpoint.bin",
                       "--in", cloud, "--out", target, "--n", 17)
    assert code == 4 and "exit=4" in err and not target.exists()


def test_eval_rep_identity_pairs(workspace, capsys, tmp_path):
    assert main(["gen-pairs", "--in", str(workspace / "data"), "--out", str(tmp_path),
                 "--rotation", "none", "--translation", "0"]) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, "eval-rep", "--checkpoint", workspace / "run" / "checkpoint.bin",
                       "--pairs", tmp_path / "pairs.csv", "--counts", "4,8,16,32")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["n_keypoints"] for r in rows] == ["4", "8", "16"]
    assert all(float(r["repeatability"]) == 1.0 for r in rows)


def test_grad_check_losses_exit_zero(capsys):
    code, out, _ = run(capsys, "grad-check", "--scope", "losses", "--instances", 2)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and rows and all(r["pass"] == "1" for r in rows)


@pytest.mark.parametrize("argv,code", [
    (["gen-data", "--shape", "torus", "--count", "1", "--out", "x"], 2),
    (["frobnicate"], 2),
    (["gen-data", "--shape", "box", "--count", "1", "--points", "50", "--out", "{tmp}/d"], 4),
    (["detect", "--checkpoint", "{tmp}/missing.bin", "--in", "{tmp}/a.xyz", "--out", "{tmp}/o"], 3),
    (["train", "--config", "{tmp}/missing.cfg"], 3),
    (["degeneracy", "--seed", "1"], 2),
])
def test_exit_codes(argv, code, tmp_path, capsys):
    got, _, err = run(capsys, *[a.replace("{tmp}", str(tmp_path)) for a in argv])
    assert got == code and f"exit={code}" in err


def test_bad_config_exit(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("bogus = 1\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg")
    assert code == 2 and "unknown key" in err


def test_malformed_cloud(workspace, tmp_path, capsys):
    (tmp_path / "bad.xyz").write_text("1 2\nfoo bar baz\n")
    code, _, err = run(capsys, "detect", "--checkpoint", workspace / "run" / "checkpoint.bin",
                       "--in", tmp_path / "bad.xyz", "--out", tmp_path / "o.csv")
    assert code == 4 and "malformed" in err


def _replay(capsys, argv_fn, files=()):
    outs = []
    for k in range(2):
        code, out, _ = run(capsys, *argv_fn(k))
        assert code == 0
        outs.append((out, [Path(str(f).format(k=k)).read_bytes() for f in files]))
    assert outs[0] == outs[1]
    return outs[0][0]


def test_replay_byte_identical(workspace, tmp_path, capsys):
    ck = workspace / "run" / "checkpoint.bin"
    data = workspace / "data"
    pairs = workspace / "pairs" / "pairs.csv"
    cloud = sorted(data.glob("*.xyz"))[0]
    t = tmp_path
    _replay(capsys, lambda k: ["gen-data", "--shape", "pyramid", "--count", 2, "--points", 200,
                               "--seed", 3, "--out", t / f"d{k}"],
            [t / "d{k}" / "labels.csv", t / "d{k}" / "files.csv", t / "d{k}" / "pyramid_0001.xyz"])
    _replay(capsys, lambda k: ["gen-pairs", "--in", data, "--out", t / f"p{k}", "--seed", 5,
                               "--noise", 0.01],
            [t / "p{k}" / "pairs.csv"])
    cfg = t / "c.cfg"
    cfg.write_text(TINY.format(seed=3))
    _replay(capsys, lambda k: ["train", "--config", cfg, "--out", t / f"r{k}"],
            [t / "r{k}" / "loss.csv", t / "r{k}" / "checkpoint.bin"])
    _replay(capsys, lambda k: ["detect", "--checkpoint", ck, "--in", cloud, "--out", t / f"k{k}.csv"])
    _replay(capsys, lambda k: ["eval-rep", "--checkpoint", ck, "--pairs", pairs, "--seed", 2])
    _replay(capsys, lambda k: ["eval-rep", "--checkpoint", ck, "--pairs", pairs, "--sweep", "noise",
                               "--levels", "0,0.01,0.02"])
    _replay(capsys, lambda k: ["eval-reg", "--checkpoint", ck, "--pairs", pairs, "--iters", 100,
                               "--desc-steps", 2])
    _replay(capsys, lambda k: ["degeneracy", "--checkpoint", ck, "--in", data])
    _replay(capsys, lambda k: ["degeneracy", "--sweep", "--config", cfg, "--M", "16",
                               "--K", "4,8", "--eval-count", 3, "--out", t / f"s{k}"],
            [t / "s{k}" / "sweep.csv"])
    _replay(capsys, lambda k: ["grad-check", "--scope", "losses", "--instances", 1])
