import csv
import os

import numpy as np
import pytest

from phimodule.cli import DEFAULTS, ConfigError, dispatch, emit_report, load_config, parse_config_text

SMALL = ["--set", "data.n_molecules=20", "--set", "data.atoms_min=6", "--set", "data.atoms_max=8",
         "--set", "host.n_features=8", "--set", "host.n_interactions=1", "--set", "host.n_rbf=8",
         "--set", "phi.k=3", "--set", "phi.hidden_channels=4", "--set", "train.epochs=1",
         "--set", "train.batch_size=8"]


def test_config_parsing(tmp_path):
    text = "seed = 7  # comment\nphi.beta = 0.01\nphi.enabled = false\n"
    cfg = parse_config_text(text)
    assert cfg == {"seed": 7, "phi.beta": 0.01, "phi.enabled": False}
    p = tmp_path / "c.cfg"
    p.write_text(text)
    full = load_config(str(p), ["seed=9"])
    assert full["seed"] == 9 and full["phi.beta"] == 0.01 and set(full) == set(DEFAULTS)
    with pytest.raises(ConfigError, match="valid keys"):
        load_config(None, ["phi.nope=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["seed=abc"])


def test_unknown_key_exit_code(tmp_path, capsys):
    assert dispatch(["verify", "--out-dir", str(tmp_path), "--set", "bogus=1"]) == 1
    err = capsys.readouterr().err
    assert "bogus" in err and "phi.k" in err


def test_verify_command(tmp_path):
    code = dispatch(["verify", "--out-dir", str(tmp_path), "--set", "verify.n_instances=20",
                     "--set", "report.format=both"])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "verify.csv")))
    text = (tmp_path / "verify.txt").read_text()
    n_pass = sum(int(r["passed"]) for r in rows)
    assert f"{n_pass}/{len(rows)} passed" in text
    assert (tmp_path / "manifest.txt").exists()


def test_gen_data_manifest_reproducible(tmp_path):
    for d in ("a", "b"):
        assert dispatch(["gen-data", "--out-dir", str(tmp_path / d)] + SMALL) == 0
    assert (tmp_path / "a" / "manifest.txt").read_text() == (tmp_path / "b" / "manifest.txt").read_text()


def test_train_eval_and_echo(tmp_path):
    out = tmp_path / "run"
    assert dispatch(["train", "--out-dir", str(out), "--set", "phi.beta=0.003"] + SMALL) == 0
    echo = (out / "config.echo").read_text()
    assert "phi.beta = 0.003" in echo and echo.startswith("command = train")
    assert (out / "summary.csv").exists() and (out / "best.ckpt").exists()
    ev = tmp_path / "ev"
    assert dispatch(["eval", "--out-dir", str(ev), "--set", f"eval.checkpoint={out / 'best.ckpt'}"]
                    + SMALL) == 0
    row = next(csv.DictReader(open(ev / "eval.csv")))
    assert int(row["n"]) == 2 and np.isfinite(float(row["mae"]))


def test_md_command(tmp_path):
    out = tmp_path / "run"
    dispatch(["train", "--out-dir", str(out)] + SMALL)
    (tmp_path / "s.xyz").write_text("3\n\nC 0 0 0\nO 1.3 0 0\nN 0 1.3 0\n")
    md = tmp_path / "md"
    code = dispatch(["md", "--out-dir", str(md), "--set", f"md.checkpoint={out / 'best.ckpt'}",
                     "--set", f"md.structure={tmp_path / 's.xyz'}", "--set", "md.steps=20",
                     "--set", "md.trajectory_every=10"])
    assert code == 0
    assert len((md / "drift.csv").read_text().splitlines()) == 22
    assert (md / "md_summary.csv").exists() and (md / "trajectory.xyz").exists()


def test_numerical_failure_exit_code(tmp_path):
    (tmp_path / "d.xyz").write_text("".join(
        f"2\nenergy={e}\nC 0 0 0\nO {1.2 + 0.1 * i} 0 0\n"
        for i, e in enumerate(["nan"] + ["1.0"] * 19)))
    code = dispatch(["train", "--out-dir", str(tmp_path / "o"), "--set",
                     f"data.path={tmp_path / 'd.xyz'}", "--set", "train.batch_size=32"] + SMALL)
    assert code == 2


def test_emit_report(tmp_path):
    assert emit_report([], ["a", "b"], str(tmp_path / "e"), "csv")
    assert (tmp_path / "e.csv").read_text().strip() == "a,b"
    vals = np.random.default_rng(0).normal(size=5)
    emit_report([{"x": float(v)} for v in vals], ["x"], str(tmp_path / "f"))
    back = [float(r["x"]) for r in csv.DictReader(open(tmp_path / "f.csv"))]
    assert np.max(np.abs(np.array(back) - vals)) <= 1e-12
    with pytest.raises(ConfigError):
        emit_report([], ["a"], str(tmp_path / "g"), "xml")
