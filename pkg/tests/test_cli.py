import json
import subprocess
import sys

import numpy as np
import pytest

from fibernf import cli

from oracles import free_transfer


def run(argv, capsys):
    rc = cli.main(argv)
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def aniso_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("aniso")
    assert cli.main(["normalize", "--ham", "aniso", "--delta", "0.5", "--out", str(out)]) == 0
    return out


def test_list(capsys):
    rc, out, _ = run(["list"], capsys)
    assert rc == 0
    for name in ("free", "aniso", "cross", "riem1", "osc"):
        assert name in out


def test_list_json(capsys):
    rc, out, _ = run(["list", "--json"], capsys)
    names = {d["name"] for d in json.loads(out)}
    assert rc == 0 and {"free", "aniso", "cross", "riem1", "osc"} <= names


def test_normalize_writes_outputs(aniso_run):
    for f in ("report.json", "recipe.json", "orbit.csv", "steps.json"):
        assert (aniso_run / f).is_file()
    report = json.loads((aniso_run / "report.json").read_text())
    assert all(c["pass"] for c in report["conditions"])
    assert (aniso_run / "orbit.csv").read_text().startswith("t,q0,q1,p0,p1,energy")


def test_normalize_cross_flags_obstruction(tmp_path, capsys):
    rc, out, _ = run(["normalize", "--ham", "cross", "--eps", "0.1", "--out", str(tmp_path)], capsys)
    assert rc == 0
    assert "NONZERO" in out
    assert not json.loads((tmp_path / "report.json").read_text())["obstruction"]["vanishes"]


def test_normalize_negative_delta(tmp_path, capsys):
    rc, _, err = run(["normalize", "--ham", "free", "--delta", "-1", "--out", str(tmp_path)], capsys)
    assert rc == 2 and "delta must be positive" in err


def test_unknown_hamiltonian(capsys):
    rc, _, err = run(["normalize", "--ham", "nope"], capsys)
    assert rc == 2 and "unknown Hamiltonian" in err


def test_expression_field(tmp_path, capsys):
    rc, out, _ = run(["normalize", "--expr", "0.5*(p0^2+p1^2)+0.05*q1*p0", "--d", "1",
                      "--out", str(tmp_path)], capsys)
    assert rc == 0


def test_expression_needs_dimension(capsys):
    rc, _, err = run(["normalize", "--expr", "p0^2"], capsys)
    assert rc == 2 and "--d" in err


def test_bad_start_vector(capsys):
    rc, _, err = run(["normalize", "--ham", "free", "--q", "0,0,0"], capsys)
    assert rc == 2 and "q needs 2 components" in err


def test_custom_start(tmp_path, capsys):
    rc, _, _ = run(["integrate", "--ham", "free", "--p", "1,0.5", "--T", "1", "--steps", "16",
                    "--out", str(tmp_path / "o.csv")], capsys)
    rows = (tmp_path / "o.csv").read_text().splitlines()
    last = [float(v) for v in rows[-1].split(",")]
    assert rc == 0 and last[1:3] == pytest.approx([1.0, 0.5])


def test_integrate_stdout(capsys):
    rc, out, _ = run(["integrate", "--ham", "osc", "--steps", "16"], capsys)
    assert rc == 0 and len(out.splitlines()) == 18


def test_integrate_too_few_steps(capsys):
    rc, _, err = run(["integrate", "--ham", "osc", "--steps", "8"], capsys)
    assert rc == 2 and "16 steps" in err


def test_verify_reproduces_flags(aniso_run, capsys):
    rc, out, _ = run(["verify", str(aniso_run / "recipe.json"), "--json"], capsys)
    assert rc == 0
    fresh = json.loads(out)
    saved = json.loads((aniso_run / "report.json").read_text())
    assert [c["pass"] for c in fresh["conditions"]] == [c["pass"] for c in saved["conditions"]]


def test_verify_tight_tolerance_fails(aniso_run, capsys):
    rc, _, _ = run(["verify", str(aniso_run / "recipe.json"), "--tol", "1e-12"], capsys)
    assert rc == 1


def test_verify_missing_file(tmp_path, capsys):
    rc, _, err = run(["verify", str(tmp_path / "none.json")], capsys)
    assert rc == 2 and "not found" in err


def test_verify_broken_recipe(tmp_path, capsys):
    (tmp_path / "r.json").write_text("{}")
    rc, _, _ = run(["verify", str(tmp_path / "r.json")], capsys)
    assert rc == 2


def test_obstruction_command(capsys):
    rc, out, _ = run(["obstruction", "--ham", "cross", "--json"], capsys)
    doc = json.loads(out)
    assert rc == 0 and not doc["vanishes"]
    np.testing.assert_allclose(doc["values"], 0.1, atol=1e-9)


def test_obstruction_after_random_map(capsys):
    rc, out, _ = run(["obstruction", "--ham", "free", "--random-map", "vertical-flat", "--seed", "3",
                      "--json"], capsys)
    assert rc == 0 and json.loads(out)["vanishes"]


def test_transfer_free(tmp_path, capsys):
    rc, out, _ = run(["transfer", "--ham", "free", "--delta", "0.5", "--out", str(tmp_path)], capsys)
    assert rc == 0
    doc = json.loads((tmp_path / "transfer.json").read_text())
    np.testing.assert_allclose(doc["L_H"]["L"], free_transfer(1, 0.5), atol=1e-6)
    assert "0.500000" in out


def test_transfer_experiment_csv(tmp_path, capsys):
    rc, out, _ = run(["transfer", "--ham", "aniso", "--experiment", "0.5*q1^2", "--eps", "1e-3,1e-2",
                      "--out", str(tmp_path)], capsys)
    assert rc == 0
    lines = (tmp_path / "experiment.csv").read_text().splitlines()
    assert lines[0] == "eps,identity_residual,effect_size,symplecticity_L1,symplecticity_L2"
    assert len(lines) == 3
    assert lines[1] in out


def test_transfer_unknown_hamiltonian(capsys):
    rc, _, _ = run(["transfer", "--ham", "nope"], capsys)
    assert rc == 2


def test_homog_riem1(tmp_path, capsys):
    rc, out, _ = run(["homog", "--ham", "riem1", "--degree", "1", "--delta", "0.4", "--out", str(tmp_path)],
                     capsys)
    assert rc == 0 and "P0 =" in out


def test_homog_rejects_non_homogeneous(tmp_path, capsys):
    rc, _, err = run(["homog", "--ham", "osc", "--degree", "2", "--out", str(tmp_path)], capsys)
    assert rc == 2 and "not homogeneous of declared degree" in err


def test_homog_free(tmp_path, capsys):
    rc, _, _ = run(["homog", "--ham", "free", "--degree", "2", "--out", str(tmp_path)], capsys)
    assert rc == 0


def test_homog_needs_degree(tmp_path, capsys):
    rc, _, err = run(["homog", "--ham", "free", "--out", str(tmp_path)], capsys)
    assert rc == 2 and "--degree" in err


def test_config_file_with_flag_override(tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text(f"# defaults\nham = aniso\ndelta = 0.3\nout = {tmp_path / 'o'}\njson = true\n")
    rc, out, _ = run(["--config", str(conf), "normalize"], capsys)
    assert rc == 0 and json.loads(out)["delta_used"] == 0.3
    rc, out, _ = run(["--config", str(conf), "normalize", "--delta", "0.4"], capsys)
    assert rc == 0 and json.loads(out)["delta_used"] == 0.4


def test_config_unknown_key(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n")
    rc, _, err = run(["--config", str(conf), "list"], capsys)
    assert rc == 2 and "colour" in err


def test_config_missing_file(capsys):
    rc, _, err = run(["--config", "/nonexistent/x.conf", "list"], capsys)
    assert rc == 2 and "cannot read config" in err


def test_usage_error_exit_code(capsys):
    assert cli.main(["normalize", "--delta", "abc"]) == 2
    assert cli.main([]) == 2


def test_reports_are_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["normalize", "--ham", "osc", "--seed", "7", "--out", str(out)]) == 0
    for f in ("report.json", "recipe.json", "orbit.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fibernf", "list"], capture_output=True, text=True)
    assert proc.returncode == 0 and "riem1" in proc.stdout
