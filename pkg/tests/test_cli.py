import json
import subprocess
import sys

import pytest

from sudo_dpo.cli import main
from sudo_dpo.data import load_dataset
from sudo_dpo.training import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    lines = out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


TINY = ["--steps", 8, "--batch", 8, "--hidden", "8,8", "--T", 10]


@pytest.fixture()
def gm_file(tmp_path, capsys):
    path = tmp_path / "gm.sud"
    code, _, _ = run(capsys, "gen-data", "--kind", "gm", "--k", 4, "--d", 2, "--n", 200,
                     "--seed", "0x2a", "--out", path, "--pairs-out", tmp_path / "pairs.sud")
    assert code == 0
    return path


def test_gen_data(tmp_path, capsys, gm_file):
    ds = load_dataset(gm_file)
    assert (ds.kind, ds.n, ds.K, ds.dim) == ("vector", 200, 4, 2)
    code, out, _ = run(capsys, "gen-data", "--kind", "grid", "--k", 3, "--side", 8, "--n", 20,
                       "--seed", 1, "--out", tmp_path / "g.sud")
    assert code == 0 and summary(out)["dim"] == 8


def test_train_sample_eval(tmp_path, capsys, gm_file):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    code, out, _ = run(capsys, "train", "--data", gm_file, "--method", "sft", *TINY,
                       "--out-ckpt", a, "--metrics", tmp_path / "a.csv")
    assert code == 0 and summary(out)["steps"] == 8
    code, _, _ = run(capsys, "train", "--data", gm_file, "--method", "sudo", *TINY,
                     "--init-ckpt", a, "--out-ckpt", b, "--lambda1", 0, "--c", -1000)
    assert code == 0
    assert load_checkpoint(b).method == "sudo"
    code, _, _ = run(capsys, "train", "--data", gm_file, "--method", "dpo", *TINY,
                     "--pairs", tmp_path / "pairs.sud", "--out-ckpt", tmp_path / "c.ckpt")
    assert code == 0

    csv = tmp_path / "s.csv"
    code, _, _ = run(capsys, "sample", "--ckpt", b, "--cond", 2, "--n", 5, "--seed", 7, "--out", csv)
    rows = csv.read_text().splitlines()
    assert code == 0 and rows[0] == "condition,x_1,x_2" and len(rows) == 6
    assert all(r.startswith("2,") for r in rows[1:])

    report = tmp_path / "r.json"
    code, out, _ = run(capsys, "eval", "--ckpt-a", a, "--ckpt-b", a, "--data", gm_file,
                       "--n-per-cond", 4, "--seed", 1, "--report", report)
    assert code == 0
    assert json.loads(report.read_text())["win_rate_a"] == 50.0


def test_ablate(tmp_path, capsys):
    grid = tmp_path / "g.sud"
    run(capsys, "gen-data", "--kind", "grid", "--k", 4, "--side", 8, "--n", 40, "--out", grid)
    out_csv = tmp_path / "abl.csv"
    code, out, _ = run(capsys, "ablate", "--data", grid, *TINY, "--pretrain-steps", 4,
                       "--seeds", "1,2", "--n-per-cond", 2, "--out", out_csv)
    assert code == 0
    assert set(summary(out)["win_rate_vs_sft"]) == {"sft", "blur", "random_grid", "random_image"}
    assert out_csv.read_text().startswith("row,applicable")


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 1, "--h", "1e-5", "--tol", "1e-4")
    s = summary(out)
    assert code == 0 and s["max_rel_err"] < 1e-4 and s["n_params"] == 1618
    code, out, _ = run(capsys, "gradcheck", "--seed", 1, "--tol", "1e-30")
    assert code == 4 and summary(out)["passed"] is False


def test_usage_errors(capsys, gm_file, tmp_path):
    code, out, err = run(capsys, "train", "--bogus")
    assert code == 1 and "usage:" in err and out == ""
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "usage:" in err
    code, _, err = run(capsys, "train", "--data", gm_file, "--downgrade", "blur", *TINY,
                       "--out-ckpt", tmp_path / "x.ckpt")
    assert code == 1 and "grid" in err
    code, _, err = run(capsys, "gen-data", "--kind", "gm", "--seed", "nope", "--out", tmp_path / "z")
    assert code == 1


def test_corrupt_magic_exit_code(tmp_path, capsys, gm_file):
    bad = tmp_path / "bad.sud"
    bad.write_bytes(b"JUNK" + gm_file.read_bytes()[4:])
    code, out, err = run(capsys, "train", "--data", bad, *TINY, "--out-ckpt", tmp_path / "x.ckpt")
    assert code == 2 and "byte offset 0" in err and out == ""
    assert not (tmp_path / "x.ckpt").exists()
    code, _, _ = run(capsys, "sample", "--ckpt", tmp_path / "missing", "--cond", 0, "--out", tmp_path / "s")
    assert code == 2


def test_numeric_failure_exit_code(tmp_path, capsys, gm_file):
    code, _, err = run(capsys, "train", "--data", gm_file, "--method", "sft", *TINY, "--lr", "1e200",
                       "--warmup-frac", 0, "--steps", 40, "--out-ckpt", tmp_path / "x.ckpt")
    assert code == 3 and "step" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sudo_dpo", "gradcheck", "--method", "sft"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["passed"] is True
