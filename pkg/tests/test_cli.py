import csv
import io
import json

import pytest

from eqcausal.cli import main, parse_do_clause
from eqcausal.dynamics import InterventionError
from eqcausal.model import parse_model


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_do_clause(lv, ms4):
    s = parse_do_clause("X2=2.0", lv)
    assert s.mode == "hard" and s.values == {"X2": 2.0}
    s = parse_do_clause("X2=(1.7,0)", ms4)
    assert s.values == {"Q2": 1.7, "P2": 0.0}
    s = parse_do_clause("X1=(0.5, 0), X3=(2.5,0)", ms4)
    assert s.targets == ("X1", "X3")
    assert parse_do_clause("X2=2", lv, kappa=10.0).kappa == 10.0


@pytest.mark.parametrize("clause", ["X2=(1.7)", "X9=(1,0)", "X2=", "X2=(a,b)", "X1=(1,0),X1=(2,0)"])
def test_parse_do_clause_errors(ms4, clause):
    with pytest.raises(InterventionError):
        parse_do_clause(clause, ms4)


def test_verify_mass_spring(capsys):
    code, out, _ = run(capsys, "verify", "--model", "models/mass_spring_d4.mdl",
                       "--do", "X2=(1.7,0)")
    assert code == 0
    report = json.loads(out)
    assert report["verdict"] == "pass"
    assert report["schema_version"] == "1"
    assert report["seed"] == 0
    assert report["settings"]["dt"] == 1e-3 and report["settings"]["t_max"] == 1e3


def test_verify_lv_exits_one(capsys):
    code, out, _ = run(capsys, "verify", "--model", "lotka_volterra", "--do", "X2=2")
    assert code == 1
    assert json.loads(out)["verdict"] == "fail"


def test_equilibrium_lv_oscillatory(capsys):
    code, out, _ = run(capsys, "equilibrium", "--model", "models/lotka_volterra.mdl")
    assert code == 0
    assert json.loads(out)["report"]["verdict"] == "oscillatory"


def test_missing_model_exits_two(capsys):
    code, _, err = run(capsys, "simulate", "--model", "nonexistent.mdl")
    assert code == 2
    assert "not found" in err


def test_usage_errors_exit_two(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "lee", "--model", "mass_spring_d4", "--do", "X2=(1.7)")[0] == 2


def test_parse_error_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.mdl"
    bad.write_text("model bad\nvar X in [0, 1] init 0\nddt X = Y\n")
    code, _, err = run(capsys, "lee", "--model", str(bad))
    assert code == 2
    assert "3:" in err


def test_simulate_csv_columns(capsys):
    code, out, _ = run(capsys, "simulate", "--model", "mass_spring_d2", "--t-max", "0.01")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["t", "Q1", "P1", "Q2", "P2"]
    assert float(rows[1][0]) == 0.0


def test_intervene_prints_model(capsys, lv):
    code, out, _ = run(capsys, "intervene", "--model", "lotka_volterra", "--do", "X2=2")
    assert code == 0
    m = parse_model(out)
    assert m.clamped == {"X2"} and m.variable("X2").init == 2.0


def test_lee_scm_solve_probe(capsys):
    code, out, _ = run(capsys, "lee", "--model", "mass_spring_d2")
    assert code == 0 and json.loads(out)["lee"]["labels"] == ["X1", "X2"]
    code, out, _ = run(capsys, "scm", "--model", "mass_spring_d2")
    assert code == 0 and json.loads(out)["scm"]["parents"] == {"X1": ["X2"], "X2": ["X1"]}
    code, out, _ = run(capsys, "scm", "--model", "lotka_volterra")
    assert code == 1
    code, out, _ = run(capsys, "solve", "--model", "mass_spring_d2", "--do", "X2=(2.5,0)")
    assert json.loads(out)["report"]["solutions"][0]["Q1"] == pytest.approx(1.25)
    code, out, _ = run(capsys, "probe", "--model", "mass_spring_d2", "--samples", "3",
                       "--seed", "4")
    report = json.loads(out)
    assert report["report"]["stable"] and report["seed"] == 4


def test_reports_are_deterministic(capsys, tmp_path):
    outs = []
    for n in range(2):
        path = tmp_path / f"r{n}.json"
        assert main(["verify", "--model", "mass_spring_d2", "--do", "X1=(0.4,0)",
                     "--seed", "7", "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_soft_intervention_via_cli(capsys):
    code, out, _ = run(capsys, "equilibrium", "--model", "lotka_volterra", "--do", "X2=2",
                       "--kappa", "100")
    assert code == 0
    point = json.loads(out)["report"]["point"]
    assert point["X2"] == pytest.approx(200 / 101, abs=1e-6)
