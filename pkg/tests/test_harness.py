import json
import os

import pytest
import yaml

from kinbrown.harness import ConfigError, parse_config, render_csv, run_experiment
from kinbrown.harness.cli import main


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def tables(out):
    return {f: (out / f).read_bytes() for f in sorted(os.listdir(out)) if f.endswith(".csv")}


def test_smoke_ibp_check(tmp_path, capsys):
    out = tmp_path / "ibp"
    code = main(["ibp-check", "--T", "4", "--paths", "10000", "--grid", "16",
                 "--out", str(out), "--check"])
    assert code == 0, capsys.readouterr().out
    man = json.loads((out / "manifest.json").read_text())
    assert man["operation"] == "ibp-check"
    assert list(man["tables"]) == ["ibp_vs_fd"]
    assert man["tables"]["ibp_vs_fd"]["rows"] == 12
    assert man["passed"] is True
    assert len(man["config_hash"]) == 64
    assert "PASS ibp_fd_agreement" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path):
    cfg = {"operation": "lln", "seed": 9, "params": {"lam": [5.0, 10.0], "paths": 12}}
    path = write_yaml(tmp_path / "lln.yaml", cfg)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["lln", "--config", path, "--out", str(a)]) == 0
    assert main(["lln", "--config", path, "--out", str(b)]) == 0
    assert main(["lln", "--config", path, "--out", str(c), "--threads", "4"]) == 0
    assert tables(a) == tables(b) == tables(c)
    ma = json.loads((a / "manifest.json").read_text())
    mc = json.loads((c / "manifest.json").read_text())
    assert ma["config_hash"] == mc["config_hash"]
    assert mc["threads"] == 4


def test_violated_threshold_exits_one(tmp_path, capsys):
    cfg = {"operation": "lln", "params": {"lam": [5.0], "paths": 8},
           "checks": {"max_deviation": 1e-9}}
    path = write_yaml(tmp_path / "c.yaml", cfg)
    code = main(["lln", "--config", path, "--out", str(tmp_path / "o")])
    assert code == 1
    assert "FAIL lln_deviation" in capsys.readouterr().out


def test_negmom_checks_pass(tmp_path):
    res = run_experiment(parse_config({"operation": "negmom", "checks": True}),
                         str(tmp_path / "n"))
    assert res.passed and res.exit_code == 0
    names = {c.name for c in res.checks}
    assert {"closed_form", "monotone"} <= names


def test_paths_debug_table(tmp_path):
    res = run_experiment(parse_config({"operation": "paths-debug",
                                       "params": {"paths": 2, "grid": 8}}),
                         str(tmp_path / "p"))
    text = (tmp_path / "p" / "paths.csv").read_text().splitlines()
    assert text[0] == "t,B0,B1"
    assert len(text) == 10
    assert res.exit_code == 0


@pytest.mark.parametrize("raw,where", [
    ({"operation": "rates", "params": {"bogus": 1}}, "params.bogus"),
    ({"operation": "rates", "params": {"paths": "many"}}, "params.paths"),
    ({"operation": "coupling", "params": {"modes": ["line", "torus"]}}, "params.modes[1]"),
    ({"operation": "ibp-check", "params": {"x": {"u": 0.1, "w": 2}}}, "params.x.w"),
    ({"operation": "lln", "checks": {"k_sigma": -1}}, "checks.k_sigma"),
    ({"operation": "tails", "seed": -3}, "seed"),
    ({"operation": "nope"}, "operation"),
    ({"operation": "negmom", "extra": 1}, "extra"),
])
def test_config_errors_name_the_field(raw, where):
    with pytest.raises(ConfigError) as err:
        parse_config(raw)
    assert err.value.path == where


def test_cli_config_error_exit_two(tmp_path, capsys):
    path = write_yaml(tmp_path / "bad.yaml", {"operation": "rates",
                                              "params": {"T": [1, -2]}})
    assert main(["rates", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "params.T[1]" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_cli_operation_mismatch(tmp_path):
    path = write_yaml(tmp_path / "m.yaml", {"operation": "lln"})
    assert main(["tails", "--config", path]) == 2


def test_cli_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_defaults_and_digest():
    a = parse_config({"operation": "coupling"})
    assert a.params["paths"] == 20_000
    assert a.checks == {}
    b = parse_config({"operation": "coupling", "output": "elsewhere", "threads": 8})
    assert a.digest() == b.digest()
    c = parse_config({"operation": "coupling", "seed": 1})
    assert a.digest() != c.digest()
    assert parse_config({"operation": "coupling", "checks": True}).checks["k_sigma"] == 3.0


def test_render_csv():
    rows = [{"a": 1, "b": 0.1, "c": True}, {"a": 2, "b": float("nan"), "c": False}]
    text = render_csv(["a", "b", "c"], rows)
    assert text == "a,b,c\n1,0.1,true\n2,nan,false\n"
