import csv
import subprocess
import sys

import numpy as np
import pytest

from vcreg import numeric as nm
from vcreg.cli import BENCHMARK_FIELDS, benchmark_rows, main, render_table
from vcreg.data import PairSample
from vcreg.formats import load_ply, write_off
from vcreg.geometry import RigidTransform
from vcreg.model import RegistrationNet

FAST = ["--points", "48", "--K", "24", "--J", "8"]
ARCH = ["--arch", "small", *FAST]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated clouds plus a briefly trained checkpoint, shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(d / "data"), "--count", "3", "--cloud-points", "200", "--seed", "4"]) == 0
    manifest = d / "data" / "manifest.txt"
    assert main(["train", "--manifest", str(manifest), "--out", str(d / "net.ckpt"), "--epochs", "1",
                 "--lr", "0.01", *ARCH]) == 0
    return d, manifest


def test_generate_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "generate", "--out", tmp_path / name, "--count", "2", "--seed", "7")[0] == 0
    for f in ("manifest.txt", "composite_0000.off", "composite_0001.off"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_and_pretrain_are_deterministic(workspace, tmp_path, capsys):
    _, manifest = workspace
    outs = []
    for name in ("a", "b"):
        code, stdout, _ = run(capsys, "pretrain", "--manifest", manifest, "--out", tmp_path / f"p{name}.ckpt",
                              "--epochs", "1", "--log", tmp_path / f"p{name}.csv", *ARCH)
        assert code == 0
        code, stdout2, _ = run(capsys, "train", "--manifest", manifest, "--out", tmp_path / f"t{name}.ckpt",
                               "--init", tmp_path / f"p{name}.ckpt", "--epochs", "1", "--resample",
                               "--log", tmp_path / f"t{name}.csv", *ARCH)
        assert code == 0
        outs.append(stdout.replace(name + ".ckpt", "") + stdout2.replace(name + ".ckpt", ""))
    assert outs[0] == outs[1]
    for f in ("p{}.ckpt", "p{}.csv", "t{}.ckpt", "t{}.csv"):
        assert (tmp_path / f.format("a")).read_bytes() == (tmp_path / f.format("b")).read_bytes()


def test_zero_epoch_train_equals_initialisation(workspace, tmp_path, capsys):
    _, manifest = workspace
    assert run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "z.ckpt", "--epochs", "0",
               "--seed", "3", *ARCH)[0] == 0
    init = RegistrationNet(RegistrationNet.load(tmp_path / "z.ckpt").config, seed=3).state_dict()
    got = RegistrationNet.load(tmp_path / "z.ckpt").state_dict()
    assert all(np.array_equal(init[k], got[k]) for k in init)


def test_register_is_deterministic_and_refines(workspace, tmp_path, capsys):
    d, manifest = workspace
    args = ["register", "--checkpoint", d / "net.ckpt", "--manifest", manifest, "--index", 1,
            "--iterations", 2, "--icp-refine", *FAST]
    first = run(capsys, *args, "--out", tmp_path / "m1.txt", "--residuals", tmp_path / "r1.csv")
    second = run(capsys, *args, "--out", tmp_path / "m2.txt", "--residuals", tmp_path / "r2.csv")
    assert first[0] == 0 and first[1] == second[1]
    assert (tmp_path / "m1.txt").read_bytes() == (tmp_path / "m2.txt").read_bytes()
    assert "icp residuals" in first[1] and "rotation_mae" in first[1]
    m = np.loadtxt(tmp_path / "m1.txt")
    np.testing.assert_allclose(m[:3, :3] @ m[:3, :3].T, np.eye(3), atol=1e-12)
    rows = list(csv.reader(open(tmp_path / "r1.csv")))
    assert rows[0] == ["pair", "iteration", "residual"] and len(rows) >= 3


def test_register_identity_pair_from_files(workspace, tmp_path, capsys):
    d, _ = workspace
    pts = np.random.default_rng(0).normal(size=(48, 3))
    write_off(tmp_path / "a.off", pts)
    code, out, _ = run(capsys, "register", "--checkpoint", d / "net.ckpt", "--source", tmp_path / "a.off",
                       "--target", tmp_path / "a.off", *FAST)
    assert code == 0 and "self-consistency angle" in out


def test_benchmark_identity_pair_icp_row_is_zero():
    pts = np.random.default_rng(1).normal(size=(60, 3))
    pair = PairSample(pts, pts.copy(), RigidTransform.identity(), "whole")
    (row,) = benchmark_rows([pair], ["icp"])
    assert row["failures"] == 0
    assert all(abs(row[k]) < 1e-12 for k in BENCHMARK_FIELDS[3:])
    table = render_table([row]).splitlines()
    assert table[0].split() == list(BENCHMARK_FIELDS)
    assert table[2].split()[3:] == ["0.000000"] * 7


def test_benchmark_csv_schema(tmp_path, capsys):
    write_off(tmp_path / "c.off", np.random.default_rng(1).normal(size=(60, 3)))
    (tmp_path / "m.txt").write_text("c.off whole 0\n")
    code, _, _ = run(capsys, "benchmark", "--manifest", tmp_path / "m.txt", "--methods", "icp",
                     "--points", "60", "--csv", tmp_path / "b.csv")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert list(rows[0].keys()) == list(BENCHMARK_FIELDS)
    assert rows[0]["method"] == "icp" and rows[0]["failures"] == "0"


def test_benchmark_all_methods_reproducible(workspace, tmp_path, capsys):
    d, manifest = workspace
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "benchmark", "--manifest", manifest, "--checkpoint", d / "net.ckpt",
                           "--workers", 2, "--iterations", 2, "--csv", tmp_path / f"{name}.csv", *FAST)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert [r["method"] for r in rows] == ["icp", "net", "net-icp", "net-iter"]
    assert all(np.isfinite(float(r["rot_rmse"])) for r in rows)


def test_export_writes_coloured_clouds(workspace, tmp_path, capsys):
    d, manifest = workspace
    code, _, _ = run(capsys, "export", "--checkpoint", d / "net.ckpt", "--manifest", manifest,
                     "--out", tmp_path / "x", *FAST)
    assert code == 0
    virtual, colors = load_ply(tmp_path / "x" / "virtual.ply")
    assert len(virtual) == 24 and colors.tolist()[0] == [255, 0, 0]
    assert load_ply(tmp_path / "x" / "source.ply")[1].tolist()[0] == [0, 0, 255]
    assert load_ply(tmp_path / "x" / "target.ply")[1].tolist()[0] == [0, 255, 0]


def test_export_without_checkpoint_is_identity(workspace, tmp_path, capsys):
    _, manifest = workspace
    assert run(capsys, "export", "--manifest", manifest, "--out", tmp_path / "y", *FAST)[0] == 0
    src = load_ply(tmp_path / "y" / "source.ply")[0]
    assert np.array_equal(load_ply(tmp_path / "y" / "aligned.ply")[0], src)
    assert np.array_equal(np.loadtxt(tmp_path / "y" / "transform.txt"), np.eye(4))


def test_exit_codes(workspace, tmp_path, capsys):
    d, manifest = workspace
    bad = tmp_path / "bad.txt"
    bad.write_text("only two\n")
    assert run(capsys, "benchmark", "--manifest", bad, "--methods", "icp")[0] == 2
    assert run(capsys, "benchmark", "--manifest", manifest, "--methods", "nope")[0] == 2
    assert run(capsys, "register", "--checkpoint", d / "net.ckpt")[0] == 2
    nm.save_checkpoint(tmp_path / "other.ckpt", {"w": nm.Tensor(np.ones(2))}, {"kind": "other"})
    assert run(capsys, "register", "--checkpoint", tmp_path / "other.ckpt", "--manifest", manifest, *FAST)[0] == 4
    line = np.outer(np.arange(48.0), [1.0, 0.5, 0.25])
    write_off(tmp_path / "line.off", line)
    code, _, err = run(capsys, "register", "--checkpoint", d / "net.ckpt", "--source", tmp_path / "line.off",
                       "--target", tmp_path / "line.off", *FAST)
    assert code == 3 and "rank" in err
    assert run(capsys, "register", "--checkpoint", tmp_path / "missing.ckpt", "--manifest", manifest)[0] in (2, 4)


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "vcreg.cli", "generate", "--out", str(tmp_path), "--count", "1",
                          "--cloud-points", "50"], capture_output=True, text=True)
    assert out.returncode == 0 and (tmp_path / "manifest.txt").exists()
