import csv
import json
import subprocess
import sys

import pytest

from semitunnel import cli

SMALL = """
[problem]
schema_version = 1
name = small_quartic
[domain]
kind = interval
extents = -2, 2
resolution = 401
[potential]
V = (1 - x^2)^2
[hbar]
values = 0.14, 0.12, 0.1, 0.09
reference = 0.12
[windows]
harmonic_hbar = 0.2, 0.1
[surfaces]
shifts = 0.1
[output]
operator = true
"""


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.ini"
    p.write_text(SMALL)
    return p


def run(cfg_path, out, command, *extra):
    rc = cli.main([command, "--config", str(cfg_path), "--out", str(out), *extra])
    assert rc == 0
    return json.loads((out / "report.json").read_text())


def test_wells(cfg_path, tmp_path):
    rep = run(cfg_path, tmp_path, "wells")
    assert rep["command"] == "wells" and rep["wells"]["count"] == 2
    for j in (0, 1):
        with (tmp_path / "fields" / f"agmon_{j}.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["node", "x", "d"]
        assert len(rows) == 402
    assert (tmp_path / "operator.coo").exists()
    assert not (tmp_path / "sweep.csv").exists()


def test_spectrum(cfg_path, tmp_path):
    rep = run(cfg_path, tmp_path, "spectrum")
    s = rep["spectrum"]
    assert len(s["window"]) == 2
    assert s["structural"]["interlacing_ok"]


def test_interaction(cfg_path, tmp_path):
    rep = run(cfg_path, tmp_path, "interaction")
    assert rep["interaction"]["ground_pair"] == [0, 1]
    im = json.loads((tmp_path / "interaction.json").read_text())
    assert im["index"] == [[0, 0], [1, 0]]
    assert im["w"][0][1] == im["w"][1][0] < 0


def test_sweep_csv(cfg_path, tmp_path):
    rep = run(cfg_path, tmp_path, "sweep")
    with (tmp_path / "sweep.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["hbar", "delta_direct", "delta_predicted", "w_tilde", "i0_leading"]
    assert [float(r[0]) for r in rows[1:]] == [0.14, 0.12, 0.1, 0.09]
    assert len(rep["sweep"]["rows"]) == 4


def test_report_is_byte_deterministic(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(cfg_path, a, "report", "--threads", "1")
    run(cfg_path, b, "report", "--threads", "3")
    for name in ("report.json", "sweep.csv", "interaction.json", "fields/agmon_0.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    rep = json.loads((a / "report.json").read_text())
    for key in ("spectrum", "leading", "interaction", "sweep", "tolerances", "mesh", "config"):
        assert key in rep


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL + "[bogus]\nx = 1\n")
    assert cli.main(["wells", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "unknown section" in capsys.readouterr().err


def test_bad_threads(cfg_path, tmp_path):
    assert cli.main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path), "--threads", "0"]) == 2


def test_upstream_error_has_context(tmp_path, capsys):
    single = tmp_path / "single.ini"
    single.write_text(SMALL.replace("V = (1 - x^2)^2", "V = x^2"))
    assert cli.main(["interaction", "--config", str(single), "--out", str(tmp_path)]) == 1
    assert "semitunnel interaction" in capsys.readouterr().err


def test_non_finite_values_are_strings():
    assert json.loads(cli.dumps({"a": float("nan"), "b": float("inf")})) == {"a": "nan", "b": "inf"}


def test_module_entry_point(cfg_path, tmp_path):
    out = subprocess.run([sys.executable, "-m", "semitunnel", "wells", "--config", str(cfg_path),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0
    assert "report.json" in out.stdout
