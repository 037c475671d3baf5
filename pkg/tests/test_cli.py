import csv
import json

import numpy as np
import pytest

from flowattn import cli, matcore


def rows(text):
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(body))


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_solve_writes_flows_and_diagnostics(tmp_path, capsys):
    out = tmp_path / "z.csv"
    code, text, _ = run(capsys, "solve", "--n", "6", "--lambda", "0", "--alpha", "1000",
                        "--tol", "1e-10", "--out", str(out))
    assert code == cli.EXIT_OK
    diag = json.loads(text)
    assert diag["converged"] and diag["feas_residual"] <= 10 / 1000
    Z = matcore.read_csv(out)
    assert Z.shape == (6, 6)
    side = json.loads((tmp_path / "z.csv.json").read_text())
    assert side["config"]["alpha"] == 1000 and side["config"]["lambda_star"] == 0
    assert out.read_text().startswith("# config: ")


def test_solve_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "z.csv")
    assert run(capsys, "solve", "--n", "8", "--max-iter", "2", "--out", out)[0] == cli.EXIT_NOCONV
    assert run(capsys, "solve", "--alpha", "-1", "--out", out)[0] == cli.EXIT_INPUT
    assert run(capsys, "solve", "--r", str(tmp_path / "missing.csv"), "--out", out)[0] == cli.EXIT_INPUT
    assert run(capsys, "solve", "--bogus")[0] == cli.EXIT_INPUT
    bad = tmp_path / "r.csv"
    matcore.write_csv(bad, np.array([[0.5, -0.5], [0.5, 0.5]]))
    assert run(capsys, "solve", "--r", str(bad), "--out", out)[0] == cli.EXIT_INPUT


def test_solve_reads_csv_inputs(tmp_path, capsys):
    R = np.full((3, 3), 1 / 3)
    matcore.write_csv(tmp_path / "r.csv", R)
    out = tmp_path / "z.csv"
    code, _, _ = run(capsys, "solve", "--r", str(tmp_path / "r.csv"), "--lambda", "0",
                     "--method", "exact", "--out", str(out))
    assert code == 0
    # uniform resistance, no friction: every flow is alpha / (r + n alpha)
    assert np.allclose(matcore.read_csv(out), 0.1 / (1 / 3 + 0.3), atol=1e-12)


def test_oracle_table(capsys):
    code, text, _ = run(capsys, "oracle", "--n", "5", "--lambda", "0")
    assert code == 0
    t = rows(text)
    assert [float(r["alpha"]) for r in t] == [10, 100, 1000]
    err = [float(r["max_abs_error_vs_oracle"]) for r in t]
    assert err[0] > err[1] > err[2]
    assert float(t[-1]["max_abs_error_renormalized"]) <= 1e-6
    code, text, _ = run(capsys, "oracle", "--n", "1")
    assert code == 0
    for r in rows(text):
        assert float(r["max_abs_error_renormalized"]) <= 1e-12


def test_gradcheck_subcommand(capsys):
    code, text, _ = run(capsys, "gradcheck")
    doc = json.loads(text)
    assert code == 0 and doc["passed"] and doc["max_rel_err"] <= 1e-4
    names = {r["op"] for r in doc["reports"]}
    assert {"unrolled_solver", "exact_flows", "layer_sfi", "soft_threshold"} <= names
    code, text, err = run(capsys, "gradcheck", "--ops", "soft_threshold")
    assert code == 0 and [r["op"] for r in json.loads(text)["reports"]] == ["soft_threshold"]
    assert err == ""
    _, _, err = run(capsys, "gradcheck", "--ops", "exp", "--eps", "1e-2")
    assert "warning" in err
    assert run(capsys, "gradcheck", "--ops", "nope")[0] == cli.EXIT_INPUT


def test_train_and_warm_start(tmp_path, capsys):
    d1 = tmp_path / "dense"
    code, _, _ = run(capsys, "train", "--mode", "dfi", "--epochs", "5", "--eval-every", "5",
                     "--out", str(d1))
    assert code == 0
    for f in ("metrics.csv", "checkpoint.sfic", "checkpoint.sfic.json", "summary.json"):
        assert (d1 / f).exists()
    assert (d1 / "attention").is_dir()
    assert json.loads((d1 / "summary.json").read_text())["config"]["mode"] == "dfi"
    d2 = tmp_path / "plus"
    code, _, _ = run(capsys, "train", "--mode", "sfi-plus", "--epochs", "3",
                     "--from-ckpt", str(d1 / "checkpoint.sfic"), "--out", str(d2))
    assert code == 0
    summary = json.loads((d2 / "summary.json").read_text())
    assert summary["config"]["warm_start"].endswith("checkpoint.sfic")
    # mismatched architecture
    code, _, _ = run(capsys, "train", "--mode", "sfi-plus", "--heads", "4", "--epochs", "1",
                     "--from-ckpt", str(d1 / "checkpoint.sfic"), "--out", str(tmp_path / "x"))
    assert code == cli.EXIT_INPUT
    assert run(capsys, "train", "--mode", "sfi", "--from-ckpt", "x", "--out", str(tmp_path / "y"))[0] == 1


def test_train_is_reproducible(tmp_path, capsys):
    d = tmp_path / "run"
    snaps = []
    for _ in range(2):
        assert run(capsys, "train", "--mode", "sfi", "--epochs", "4", "--seed", "3", "--out", str(d))[0] == 0
        snaps.append({f: (d / f).read_bytes() for f in ("metrics.csv", "checkpoint.sfic", "summary.json")})
    assert snaps[0] == snaps[1]


def test_sweep(capsys):
    code, text, _ = run(capsys, "sweep")
    assert code == 0
    t = rows(text)
    assert [float(r["lambda_star"]) for r in t] == [0, 0.5, 1, 2, 5]
    sp = [float(r["sparsity_fraction_below_1e-8"]) for r in t]
    assert sp[0] == 0.0 and sp[-1] > 0.0
    assert run(capsys, "sweep", "--lambda-list", "0,-1")[0] == cli.EXIT_INPUT


def test_gen(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert run(capsys, "gen", "--task", "longrange", "--ring-n", "10", "--hop", "3",
               "--out", str(out))[0] == 0
    doc = json.loads(out.read_text())
    assert doc["n"] == 10 and doc["config"]["hop"] == 3
    assert run(capsys, "gen", "--ring-n", "4", "--hop", "9", "--task", "longrange",
               "--out", str(out))[0] == cli.EXIT_INPUT


def test_config_file_and_env_seed(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 4, "typo_key": 1}))
    assert run(capsys, "solve", "--config", str(cfg), "--out", str(tmp_path / "z.csv"))[0] == 1
    cfg.write_text(json.dumps({"n": 4, "alpha": 5.0}))
    out = tmp_path / "z.csv"
    assert run(capsys, "solve", "--config", str(cfg), "--alpha", "7", "--out", str(out))[0] == 0
    side = json.loads((tmp_path / "z.csv.json").read_text())["config"]
    assert side["n"] == 4 and side["alpha"] == 7.0 and side["seed"] == 0
    monkeypatch.setenv("SFI_SEED", "11")
    run(capsys, "solve", "--config", str(cfg), "--out", str(out))
    assert json.loads((tmp_path / "z.csv.json").read_text())["config"]["seed"] == 11
    run(capsys, "solve", "--config", str(cfg), "--seed", "2", "--out", str(out))
    assert json.loads((tmp_path / "z.csv.json").read_text())["config"]["seed"] == 2
    monkeypatch.setenv("SFI_SEED", "abc")
    assert run(capsys, "solve", "--out", str(out))[0] == cli.EXIT_INPUT
