import csv
import json

import numpy as np
import pytest

from odemarkov.chain import random_chain, save_chain
from odemarkov.cli import main, parse_grid, parse_noise, sha256_file
from odemarkov.errors import ConfigError


def run(out, *argv):
    return main([*argv, "--out", str(out)])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(row for row in fh if not row.startswith("#")))


def manifest(out, sub):
    return json.loads((out / f"{sub.replace('-', '_')}_manifest.json").read_text())


def test_parse_grid_inclusive():
    g = parse_grid("0:1:0.1")
    assert len(g) == 11 and g[-1] == 1.0 and g[3] == 0.3
    assert len(parse_grid("0:2:0.01")) == 201
    assert len(parse_grid("0.5:0.5:0.1")) == 1
    # stop is included when it is hit within the relative tolerance
    assert parse_grid("0:0.30000000000001:0.1")[-1] == pytest.approx(0.3)
    for bad in ("0:1", "a:1:0.1", "0:1:0", "1:0:0.1", "-1:1:0.5", "0:inf:1"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_parse_noise():
    assert parse_noise("none") is None
    assert parse_noise("iid:2.5") == 2.5
    for bad in ("gauss:1", "iid:", "iid:-1", "iid:x"):
        with pytest.raises(ConfigError):
            parse_noise(bad)


def test_spectrum_shift_register_2(tmp_path):
    assert run(tmp_path, "spectrum", "--builtin", "shift-register:2", "--alpha", "0:2:0.01") == 0
    m = manifest(tmp_path, "spectrum")
    bp = m["results"]["L"]["breakpoints"][0]
    rows = read_csv(tmp_path / "spectrum_L.csv")
    assert len(rows) == 201
    for r in rows:
        a = float(r["alpha"])
        if a <= bp:
            assert abs(float(r["xi"]) - (1 - a)) <= 1e-12
    assert json.loads((tmp_path / "region_O.json").read_text())[0] == pytest.approx([0.01, 0.99])
    assert set(m["artifacts"]) == {"spectrum_L.csv", "spectrum_Q.csv", "region_O.json"}
    for name, digest in m["artifacts"].items():
        assert sha256_file(tmp_path / name) == digest


def test_spectrum_shift_register_3(tmp_path):
    assert run(tmp_path, "spectrum", "--builtin", "shift-register:3", "--alpha", "0:1:0.05") == 0
    rows = read_csv(tmp_path / "spectrum_Q.csv")
    assert len(rows) == 21


def test_missing_config_exit_2(tmp_path, capsys):
    assert run(tmp_path, "spectrum", "--config", str(tmp_path / "nope.json")) == 2
    assert "nope.json" in capsys.readouterr().err


def test_bad_flags_exit_2(tmp_path, capsys):
    assert run(tmp_path, "spectrum", "--builtin", "shift-register:2", "--alpha", "0:1") == 2
    assert run(tmp_path, "spectrum", "--builtin", "ring:2") == 2
    assert run(tmp_path, "spectrum", "--builtin", "shift-register:99") == 2
    assert run(tmp_path, "frobnicate") == 2
    assert run(tmp_path, "simulate", "--builtin", "shift-register:2", "--alpha", "0.1") == 2
    assert "--seed" in capsys.readouterr().err


def test_derivatives_shift_register(tmp_path):
    assert run(tmp_path, "derivatives", "--builtin", "shift-register:2") == 0
    doc = json.loads((tmp_path / "derivatives.json").read_text())
    assert doc["lambda_prime0"] == pytest.approx(-1.0)
    assert doc["eta_prime0"] == pytest.approx(-2.0)
    assert doc["lambda_dprime0_analytic"] is None
    assert doc["hypothesis_flags"]["distinct_eigenvalues"] is False


def test_derivatives_single_state(tmp_path):
    cfg = tmp_path / "diag.json"
    cfg.write_text(json.dumps({"k": 2, "P": [[1.0]], "m": [[[2, 0], [0, 5]]]}))
    assert run(tmp_path, "derivatives", "--config", str(cfg)) == 0
    doc = json.loads((tmp_path / "derivatives.json").read_text())
    assert doc["lambda_prime0"] == pytest.approx(-2.0)


def test_derivatives_random_chain_file(tmp_path):
    cfg = tmp_path / "rand.json"
    save_chain(random_chain(21, 4, 2, symmetric=True), cfg)
    assert run(tmp_path, "derivatives", "--config", str(cfg)) == 0
    d = json.loads((tmp_path / "derivatives.json").read_text())["deltas"]
    assert d["lambda_prime0"] <= 1e-6 and d["eta_prime0"] <= 1e-6 and d["lambda_dprime0"] <= 1e-4


def test_simulate_converged_and_diverged(tmp_path, capsys):
    args = ["simulate", "--builtin", "shift-register:2", "--noise", "iid:1.0",
            "--trials", "500", "--T", "1000", "--seed", "7"]
    assert run(tmp_path / "a", *args, "--alpha", "0.05") == 0
    assert manifest(tmp_path / "a", "simulate")["results"]["classification"] == "converged"
    assert run(tmp_path / "b", *args, "--alpha", "1.2") == 0
    assert manifest(tmp_path / "b", "simulate")["results"]["classification"] == "diverged"


def test_couple(tmp_path):
    assert run(tmp_path, "couple", "--builtin", "shift-register:2", "--alpha", "0.1",
               "--noise", "iid:1.0", "--trials", "500", "--seed", "3") == 0
    res = manifest(tmp_path, "couple")["results"]
    assert res["coupling_slope"] < 0 and res["decay_rate"] < 0
    rows = read_csv(tmp_path / "coupling.csv")
    assert [r["depth_lo"] for r in rows] == ["8", "16", "32"]


def test_couple_outside_region_is_config_error(tmp_path):
    assert run(tmp_path, "couple", "--builtin", "shift-register:2", "--alpha", "1.5",
               "--seed", "3") == 2


def test_nonlinear_tanh(tmp_path):
    assert run(tmp_path, "nonlinear", "--fixture", "tanh", "--alphas", "0.02,0.04,0.08",
               "--T", "800", "--trials", "200", "--seed", "11") == 0
    res = manifest(tmp_path, "nonlinear")["results"]
    assert res["band"] <= 3
    assert (tmp_path / "overlay.csv").exists()


def test_nonlinear_linear_embedding_sensitivity(tmp_path):
    assert run(tmp_path, "nonlinear", "--fixture", "linear", "--builtin", "shift-register:2",
               "--alphas", "0.1", "--T", "400", "--trials", "20", "--seed", "2",
               "--sensitivity") == 0
    sens = json.loads((tmp_path / "sensitivity.json").read_text())
    entry = sens["0.10000000000000001"]
    assert entry["exponent"] < 0
    assert entry["log_xi"] == pytest.approx(np.log(0.9))


def test_nonlinear_fixture_checks(tmp_path):
    assert run(tmp_path, "nonlinear", "--fixture", "quartic", "--seed", "1") == 2
    assert run(tmp_path, "nonlinear", "--fixture", "linear", "--seed", "1") == 2
    assert run(tmp_path, "nonlinear", "--fixture", "tanh", "--builtin", "shift-register:2",
               "--seed", "1") == 2


def test_reproduce_figures_near_zero(tmp_path):
    assert run(tmp_path, "reproduce-figures", "--alpha-max", "0.1", "--step", "0.001") == 0
    res = manifest(tmp_path, "reproduce-figures")["results"]
    assert set(res) == {"lambda_L2.csv", "lambda_L3.csv", "eta_L2.csv"}
    for name in ("lambda_L2.csv", "lambda_L3.csv"):
        assert res[name]["first_segment_residual_vs"]["1 - alpha"] <= 1e-8
    eta = res["eta_L2.csv"]
    assert eta["first_segment_residual_vs"]["1 - 2 alpha + 2 alpha^2"] <= 1e-8
    assert eta["segments"][0]["residual"] <= 1e-8


def test_threads_flag_does_not_change_artifacts(tmp_path):
    args = ["simulate", "--builtin", "shift-register:2", "--alpha", "0.1", "--noise", "iid:1.0",
            "--trials", "600", "--T", "200", "--seed", "5"]
    assert run(tmp_path / "a", *args) == 0
    assert run(tmp_path / "b", *args, "--threads", "3") == 0
    assert (manifest(tmp_path / "a", "simulate")["artifacts"]
            == manifest(tmp_path / "b", "simulate")["artifacts"])


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("ODEMARKOV_OUT", str(tmp_path / "env-out"))
    assert main(["derivatives", "--builtin", "shift-register:2"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["env-out"]
    assert (tmp_path / "env-out" / "derivatives.json").exists()
