import csv
import json

import numpy as np
import pytest
import yaml

from emidg.cli import EOC_HEADER, PRECOND_HEADER, main
from emidg.config import ConfigError, load, parse


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def test_converge_writes_eoc_table_and_manifest(tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["converge", "--case", "onecell", "--degree", "1", "--levels", "2",
                 "--out-dir", str(out)]) == 0
    rows = read_csv(out / "eoc_onecell_k1.csv")
    assert tuple(rows[0]) == EOC_HEADER
    assert len(rows) == 3
    assert rows[1][4] == "nan"
    assert 0.7 < float(rows[2][4]) < 1.3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "converge"
    assert manifest["parameters"]["levels"] == [0, 1]
    assert "onecell" in capsys.readouterr().out


def test_converge_is_bit_for_bit_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["converge", "--case", "twocell", "--degree", "2", "--levels", "2",
                     "--out-dir", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "eoc_twocell_k2.csv").read_bytes()
    assert a == (tmp_path / "b" / "eoc_twocell_k2.csv").read_bytes()


def test_converge_config_file_and_flag_precedence(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", {"case": "lowreg", "s": 0.25, "levels": 3, "degree": 1})
    out = tmp_path / "o"
    assert main(["converge", "--config", str(cfg), "--levels", "2", "--out-dir", str(out)]) == 0
    rows = read_csv(out / "eoc_lowreg_k1.csv")
    assert len(rows) == 3
    assert json.loads((out / "manifest.json").read_text())["parameters"]["s"] == 0.25


def test_converge_rejects_unknown_config_key(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {"case": "onecell", "colour": "red"})
    assert main(["converge", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2
    assert "colour" in capsys.readouterr().err


@pytest.mark.parametrize("flags", [["--levels", "1"], ["--degree", "5"], ["--epsilon", "2"],
                                   ["--case", "nope"]])
def test_converge_usage_errors_exit_with_2(tmp_path, flags):
    assert main(["converge", "--out-dir", str(tmp_path)] + flags) == 2


@pytest.mark.parametrize("argv", [["bogus"], []])
def test_unknown_or_missing_command_exits_with_2(argv):
    assert main(argv) == 2


def test_precond_table(tmp_path):
    out = tmp_path / "p"
    assert main(["precond", "--family", "connected", "--norm", "poincare", "--lengths", "2,4",
                 "--out-dir", str(out)]) == 0
    rows = read_csv(out / "iterations_connected.csv")
    assert tuple(rows[0]) == PRECOND_HEADER
    assert [r[:2] for r in rows[1:]] == [["2", "poincare"], ["4", "poincare"]]
    counts = [int(r[2]) for r in rows[1:]]
    assert abs(counts[0] - counts[1]) <= 4


def test_sheet_short_run(tmp_path):
    out = tmp_path / "s"
    assert main(["sheet", "--rows", "1", "--cols", "2", "--T", "0.5", "--tau", "0.1",
                 "--probe-every", "1", "--snapshot-every", "5", "--out-dir", str(out)]) == 0
    probes = read_csv(out / "probes.csv")
    assert probes[0] == ["t", "cell_1", "cell_2"]
    assert len(probes) == 7
    assert all(float(v) == pytest.approx(-85.0, abs=1e-6) for v in probes[1][1:])
    its = read_csv(out / "iterations.csv")
    assert its[0] == ["t", "iterations"] and len(its) == 6
    assert (out / "u_000005.vtk").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["parameters"]["stimulated"] == [2]


def test_sheet_without_stimulus_stays_at_rest(tmp_path):
    out = tmp_path / "s"
    assert main(["sheet", "--rows", "1", "--cols", "2", "--T", "20", "--tau", "0.5",
                 "--amplitude", "0", "--out-dir", str(out)]) == 0
    vals = np.array([[float(v) for v in r[1:]] for r in read_csv(out / "probes.csv")[1:]])
    assert np.abs(vals + 85.0).max() < 1e-6


def test_solve_onecell_matches_converge_level_zero(tmp_path):
    assert main(["converge", "--case", "onecell", "--degree", "2", "--levels", "2",
                 "--out-dir", str(tmp_path / "c")]) == 0
    cfg = write_yaml(tmp_path / "s.yaml", {"case": "onecell", "degree": 2, "level": 0,
                                           "outputs": {"vtk": False}})
    assert main(["solve", "--config", str(cfg), "--out-dir", str(tmp_path / "s")]) == 0
    conv = read_csv(tmp_path / "c" / "eoc_onecell_k2.csv")[1]
    solo = read_csv(tmp_path / "s" / "errors.csv")[1]
    assert conv[:4] == solo[:4] and conv[5] == solo[5]


def test_solve_minimal_config_gives_zero_field(tmp_path):
    cfg = write_yaml(tmp_path / "m.yaml", {"geometry": {"name": "plus_cell", "resolution": 8},
                                           "time": {"T": 1.0, "steps": 3}})
    out = tmp_path / "m"
    assert main(["solve", "--config", str(cfg), "--out-dir", str(out)]) == 0
    results = json.loads((out / "manifest.json").read_text())["results"]
    assert results["max_abs_u"] == 0.0
    lines = (out / "solution.vtk").read_text().splitlines()
    i = lines.index("LOOKUP_TABLE default")
    assert all(float(v) == 0.0 for v in lines[i + 1:i + 10])


def test_solve_dirichlet_cg_with_probes(tmp_path):
    cfg = write_yaml(tmp_path / "d.yaml", {
        "geometry": {"name": "sheet", "resolution": 6, "params": {"rows": 1, "cols": 2}},
        "membrane": {"model": "sheet", "stimulus": {"cells": [1]}},
        "bc": {"mode": "dirichlet"}, "time": {"T": 0.2, "tau": 0.1},
        "solver": {"method": "cg"}, "outputs": {"vtk": False, "probes": True}})
    out = tmp_path / "d"
    assert main(["solve", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert read_csv(out / "probes.csv")[0] == ["t", "cell_1", "cell_2"]
    assert len(read_csv(out / "iterations.csv")) == 3


def test_solve_invalid_epsilon_names_the_key(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "e.yaml", {"case": "onecell", "epsilon": 2})
    assert main(["solve", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "epsilon" in err


def test_solve_requires_config(tmp_path):
    assert main(["solve", "--out-dir", str(tmp_path)]) == 2


@pytest.mark.parametrize("data, path", [
    ({"epsilon": 2, "case": "onecell"}, "epsilon"),
    ({"case": "onecell", "geometry": {"nme": "x"}}, "geometry.nme"),
    ({"case": "onecell", "degree": 4}, "degree"),
    ({"case": "lowreg", "s": 1.5}, "s"),
    ({"case": "onecell", "coefficients": {"kappa": {"0": -1}}}, "coefficients.kappa.0"),
    ({"case": "onecell", "coefficients": {"capacitance": {"0,1": 0}}},
     "coefficients.capacitance.0,1"),
    ({"geometry": {"name": "plus_cell"}}, "time"),
    ({"case": "onecell", "time": {"steps": 2, "tau": 0.1}}, "time"),
    ({"case": "onecell", "membrane": {"model": "hodgkin"}}, "membrane.model"),
    ({"case": "onecell", "bc": {"mode": "robin"}}, "bc.mode"),
])
def test_config_errors_carry_key_paths(data, path):
    with pytest.raises(ConfigError) as info:
        parse(data)
    assert info.value.path == path


def test_config_defaults_and_load(tmp_path):
    cfg = parse({"case": "onecell"})
    assert (cfg.degree, cfg.epsilon, cfg.gamma, cfg.bc) == (1, 1, 20.0, "neumann")
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1, 2")
    with pytest.raises(ConfigError):
        load(tmp_path / "bad.yaml")
    good = write_yaml(tmp_path / "g.yaml", {"geometry": {"name": "square", "resolution": 2},
                                            "time": {"T": 1.0, "tau": 0.25},
                                            "coefficients": {"capacitance": {"0,1": 2.0}}})
    cfg = load(good)
    assert cfg.steps == 4
    assert cfg.as_dict()["capacitance"] == {"0,1": 2.0}
