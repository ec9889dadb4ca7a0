import csv
import json
import os

import numpy as np
import pytest

from sortedeffects.cli import main, read_config, resolve_config
from sortedeffects.errors import ConfigError
from sortedeffects.resampling import derive_seed
from sortedeffects.simulation import design1
from sortedeffects.sorted_inference import empirical_spe

D1_LEVELS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def csv_data(tmp_path):
    rng = np.random.default_rng(0)
    n = 300
    t = rng.integers(0, 2, n)
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    w = rng.uniform(0.5, 2, n)
    y = 1 + t * (0.5 + x1) + x1 + 0.3 * rng.normal(size=n)
    path = tmp_path / "data.csv"
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["y", "t", "x1", "x2", "w"])
        wr.writerows(zip(y, t, x1, x2, w))
    return path


def _config(tmp_path, body, name="run.yaml"):
    p = tmp_path / name
    p.write_text(body)
    return p


CSV_CONFIG = """\
data: {path: data.csv, outcome: y, covariates: [t, x1, x2], weight: w, subpopulation: "t == 1"}
model: {family: mean, terms: ["1", t, x1, x2, "t*x1", "t*x2"], treatment: t}
B: 100
classify: {u: 0.1, targets: [x1, x2, {column: x2, kind: distribution, t: 0.0}], blocks: {covs: [x1, x2]}}
sets: {u: 0.1, projections: [[x1, x2]]}
"""


def test_design1_config_gives_nine_row_table(tmp_path):
    cfg = _config(tmp_path, f"data: {{synthetic: design1}}\ngrid: {D1_LEVELS}\nscheme: multinomial\nB: 200\nseed: 4\n")
    assert main(["spe", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = _read(tmp_path / "o" / "spe.csv")
    assert [float(r["u"]) for r in rows] == D1_LEVELS
    # first replication of the Monte Carlo driver with the same seed
    eff, _ = design1().replicate(derive_seed(4, 0, 0))
    assert np.array_equal([float(r["spe"]) for r in rows], empirical_spe(eff, D1_LEVELS))
    assert list(rows[0]) == ["u", "spe", "corrected", "lower", "upper", "sigma_half"]
    assert (tmp_path / "o" / "spe.svg").read_text().startswith("<svg")


def test_default_grid_has_98_rows_and_round_trips(tmp_path, csv_data):
    cfg = _config(tmp_path, CSV_CONFIG)
    out = tmp_path / "o"
    assert main(["spe", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _read(out / "spe.csv")
    assert len(rows) == 98
    # recompute in memory and compare at full precision
    from sortedeffects.cli import build_inputs
    from sortedeffects.sorted_inference import QuantileGrid, bias_correct, bootstrap_bands

    conf = read_config(cfg)
    _, pipe, eff = build_inputs(conf)
    res = bias_correct(bootstrap_bands(pipe, eff, QuantileGrid(tuple(conf["grid"])), conf["B"], conf["alpha"], conf["scheme"], conf["seed"]))
    for col, arr in (("spe", res.spe), ("corrected", res.spe_corrected), ("lower", res.band_lower),
                     ("upper", res.band_upper), ("sigma_half", res.sigma_half)):
        assert np.array_equal([float(r[col]) for r in rows], arr)


def test_manifest_reproduces_outputs_byte_for_byte(tmp_path, csv_data):
    cfg = _config(tmp_path, CSV_CONFIG)
    for cmd in ("spe", "classify", "sets"):
        a, b = tmp_path / f"{cmd}_a", tmp_path / f"{cmd}_b"
        assert main([cmd, "--config", str(cfg), "--out", str(a), "--threads", "1"]) == 0
        # the manifest alone, from another working directory, with more workers
        cwd = os.getcwd()
        os.chdir(tmp_path.parent)
        try:
            assert main([cmd, "--config", str(a / "manifest.json"), "--out", str(b), "--threads", "4"]) == 0
        finally:
            os.chdir(cwd)
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b))
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_classify_outputs(tmp_path, csv_data):
    cfg = _config(tmp_path, CSV_CONFIG)
    out = tmp_path / "o"
    assert main(["classify", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _read(out / "classification.csv")
    assert [r["target"] for r in rows] == ["x1", "x2", "P(x2<=0)"]
    assert {"P-val", "JP-val", "se_diff"} <= set(rows[0])
    assert len({r["JP-val"] for r in rows}) == 1
    assert float(rows[0]["diff"]) > 0
    blocks = _read(out / "blocks.csv")
    assert [b["block"] for b in blocks] == ["covs", "joint"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "classify" and "t_crit" in man["results"]


def test_sets_outputs(tmp_path, csv_data):
    cfg = _config(tmp_path, CSV_CONFIG)
    out = tmp_path / "o"
    assert main(["sets", "--config", str(cfg), "--out", str(out)]) == 0
    rows = _read(out / "sets.csv")
    assert len(rows) == sum(1 for r in _read(csv_data) if r["t"] == "1")
    proj = _read(out / "projection_x1_x2.csv")
    assert list(proj[0]) == ["cell", "obs", "x1", "x2", "effect", "group", "set"]


def test_seed_flag_overrides_config(tmp_path):
    cfg = _config(tmp_path, f"data: {{synthetic: design1}}\ngrid: {D1_LEVELS}\nB: 50\nseed: 1\n")
    main(["spe", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "2"])
    main(["spe", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 2
    assert (tmp_path / "a" / "spe.csv").read_bytes() != (tmp_path / "b" / "spe.csv").read_bytes()


def test_simulate_command(tmp_path):
    cfg = _config(tmp_path, "simulate: {design: 2, n_sims: 3, n_boot: 20}\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = _read(tmp_path / "o" / "design2.csv")
    assert len(rows) == 11 and rows[1]["sd_asymptotic"] == ""


def test_exit_codes(tmp_path, csv_data, capsys):
    assert main(["spe", "--config", str(_config(tmp_path, "B: 1\n", "a.yaml")), "--out", str(tmp_path)]) == 2
    assert "a.yaml" in capsys.readouterr().err
    assert main(["spe", "--config", str(_config(tmp_path, "bogus: 1\n", "b.yaml")), "--out", str(tmp_path)]) == 2
    assert main(["spe", "--config", str(_config(tmp_path, "data: [\n", "c.yaml")), "--out", str(tmp_path)]) == 2
    missing_col = CSV_CONFIG.replace("covariates: [t, x1, x2]", "covariates: [t, x1, x3]")
    assert main(["spe", "--config", str(_config(tmp_path, missing_col, "d.yaml")), "--out", str(tmp_path)]) == 3
    collinear = CSV_CONFIG.replace('terms: ["1", t, x1, x2,', 'terms: ["1", t, x1, x1, x2,')
    assert main(["spe", "--config", str(_config(tmp_path, collinear, "e.yaml")), "--out", str(tmp_path)]) == 4
    assert "SingularDesignError" in capsys.readouterr().err
    blocked = tmp_path / "file"
    blocked.write_text("")
    assert main(["spe", "--config", str(_config(tmp_path, CSV_CONFIG, "f.yaml")), "--out", str(blocked / "sub")]) != 0


def test_resolve_config_defaults():
    cfg = resolve_config({})
    assert len(cfg["grid"]) == 98 and cfg["B"] == 500 and cfg["alpha"] == 0.1
    assert cfg["scheme"] == "exponential" and cfg["seed"] == 0
    with pytest.raises(ConfigError):
        resolve_config({"data": {"synthetic": "design1"}, "model": {"terms": ["1"], "treatment": "t"}})
    with pytest.raises(ConfigError):
        resolve_config({"grid": {"start": 0.1, "stop": 0.9}})
    with pytest.raises(ConfigError):
        resolve_config({"classify": {"u": 0.6, "targets": ["a"]}})
