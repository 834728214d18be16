import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gamlink import cli, evaluate_regression
from gamlink.io import load_model
from gamlink.nested import NestedModel, NetworkSpec

SMALL = ["--m-knots", "1", "--f-knots", "1", "--lambda", "0.1"]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


@pytest.fixture
def data_csv(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (60, 3))
    y = np.exp(np.sin(np.pi * x[:, 0]) + x[:, 1] ** 2) + 0.05 * rng.normal(size=60)
    rows = np.column_stack([x, y])
    return write_csv(tmp_path / "d.csv", ["a", "b", "c", "y"], rows.tolist())


def read_predictions(path):
    with open(path) as fh:
        r = list(csv.reader(fh))
    assert r[0] == ["prediction", "clamped"]
    return np.array([float(row[0]) for row in r[1:]]), np.array([int(row[1]) for row in r[1:]])


def test_fit_then_predict(tmp_path, data_csv, capsys):
    out = tmp_path / "m.json"
    code = cli.main(["fit", "--data", data_csv, "--response", "y", "--covariates", "a,b", *SMALL,
                     "--out", str(out)])
    assert code == 0
    assert "objective" in capsys.readouterr().out
    meta = json.loads(out.read_text())["meta"]
    assert meta["covariates"] == ["a", "b"] and meta["lambda"] == 0.1
    pred = tmp_path / "p.csv"
    assert cli.main(["predict", "--model", str(out), "--data", data_csv, "--out", str(pred)]) == 0
    yhat, clamped = read_predictions(pred)
    assert yhat.shape == (60,) and np.all(clamped == 0)
    raw = np.loadtxt(data_csv, delimiter=",", skiprows=1)
    np.testing.assert_allclose(yhat, evaluate_regression(load_model(out), raw[:, :2])[0], rtol=1e-15)
    assert np.mean((yhat - raw[:, 3]) ** 2) < 0.1 * np.var(raw[:, 3])


def test_quantile_fit_stores_alpha(tmp_path, data_csv):
    out = tmp_path / "q.json"
    code = cli.main(["quantile-fit", "--data", data_csv, "--response", "y", "--covariates", "a,b", *SMALL,
                     "--alpha", "0.3", "--epsilon", "0.001", "--out", str(out)])
    assert code == 0
    meta = load_model(out).meta
    assert meta["alpha"] == 0.3 and meta["epsilon"] == 0.001


def test_nested_fit_and_predict(tmp_path, data_csv):
    spec = NetworkSpec(2, (2, 1), {(0, 0): 0, (1, 0): 2})
    sp = tmp_path / "net.json"
    sp.write_text(spec.to_json())
    out = tmp_path / "n.json"
    code = cli.main(["nested-fit", "--spec", str(sp), "--data", data_csv, "--response", "y",
                     "--covariates", "a,b,c", *SMALL, "--max-sweeps", "30", "--out", str(out)])
    assert code == 0
    assert isinstance(load_model(out), NestedModel)
    pred = tmp_path / "p.csv"
    assert cli.main(["predict", "--model", str(out), "--data", data_csv, "--out", str(pred)]) == 0
    assert read_predictions(pred)[0].shape == (60,)


def test_simulate_writes_report_and_figures(tmp_path):
    out = tmp_path / "r.csv"
    figs = tmp_path / "figs"
    code = cli.main(["simulate", "--table1", "--n", "16", "--lambda", "0.1,0.2", "--reps", "2",
                     "--seed", "3", "--out", str(out), "--figure-data", str(figs)])
    assert code == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0].split(",")[:6] == ["n", "lambda", "imse_m1", "imse_m2", "imse_F", "imse_m1_truth_units"]
    assert lines[0].endswith("nonconverged")
    assert len(lines) == 3
    assert len(list(figs.glob("*.csv"))) == 6


@pytest.mark.parametrize("argv", [
    [],
    ["fit", "--data", "x.csv"],
    ["simulate", "--n", "15", "--reps", "1", "--out", "r.csv"],
    ["simulate", "--n", "a,b", "--out", "r.csv"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        code = cli.main(argv)
        raise SystemExit(code)
    assert exc.value.code == 1


def test_invalid_settings_exit_1(tmp_path, data_csv):
    base = ["--data", data_csv, "--response", "y", "--covariates", "a,b", "--out", str(tmp_path / "m.json")]
    assert cli.main(["fit", *base, "--lambda", "-1"]) == 1
    assert cli.main(["fit", *base, "--nu1", "2", "--nu2", "1"]) == 1
    assert cli.main(["quantile-fit", *base, "--alpha", "1.5"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"depth": 1, "widths": [2], "leaf_map": [[0, 0]]}')
    assert cli.main(["nested-fit", "--spec", str(bad), *base]) == 1
    wide = tmp_path / "wide.json"
    wide.write_text(NetworkSpec.additive(5).to_json())
    assert cli.main(["nested-fit", "--spec", str(wide), *base]) == 1


def test_data_errors_exit_2(tmp_path, data_csv):
    out = str(tmp_path / "m.json")
    fit = ["fit", "--response", "y", "--out", out]
    assert cli.main([*fit, "--data", str(tmp_path / "missing.csv"), "--covariates", "a"]) == 2
    assert cli.main([*fit, "--data", data_csv, "--covariates", "a,zz"]) == 2
    outside = write_csv(tmp_path / "o.csv", ["a", "y"], [[0.2, 1.0], [1.5, 2.0], [0.4, 0.0]])
    assert cli.main([*fit, "--data", outside, "--covariates", "a"]) == 2
    text = write_csv(tmp_path / "t.csv", ["a", "y"], [[0.2, 1.0], ["oops", 2.0]])
    assert cli.main([*fit, "--data", text, "--covariates", "a"]) == 2
    ragged = tmp_path / "r.csv"
    ragged.write_text("a,y\n0.1,1\n0.2\n")
    assert cli.main([*fit, "--data", str(ragged), "--covariates", "a"]) == 2
    empty = tmp_path / "e.csv"
    empty.write_text("a,y\n")
    assert cli.main([*fit, "--data", str(empty), "--covariates", "a"]) == 2
    junk = tmp_path / "junk.json"
    junk.write_text("{not json")
    assert cli.main(["predict", "--model", str(junk), "--data", data_csv, "--out", out]) == 2


def test_numerical_failure_exit_3(tmp_path, data_csv, monkeypatch):
    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("singular system")

    monkeypatch.setattr(cli, "fit_gam", broken)
    code = cli.main(["fit", "--data", data_csv, "--response", "y", "--covariates", "a",
                     "--out", str(tmp_path / "m.json")])
    assert code == 3


def test_module_entry_point(tmp_path, data_csv):
    out = tmp_path / "m.json"
    proc = subprocess.run(
        [sys.executable, "-m", "gamlink", "fit", "--data", data_csv, "--response", "y",
         "--covariates", "a", *SMALL, "--out", str(out)],
        capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
    proc = subprocess.run([sys.executable, "-m", "gamlink", "fit"], capture_output=True, text=True)
    assert proc.returncode == 1
