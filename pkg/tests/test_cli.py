import json
import subprocess
import sys

import pytest

from platoon_dmpc.cli import main
from test_scenario import MINIMAL


def test_presets_list(capsys):
    assert main(["presets", "list"]) == 0
    out = capsys.readouterr().out.split()
    assert "ramp_pf" in out and "equilibrium_pf" in out


def test_run_preset_writes_outputs(tmp_path, capsys):
    code = main(["run", "--scenario", "equilibrium_pf", "--steps", "3", "--out", str(tmp_path)])
    assert code == 0
    folder = tmp_path / "equilibrium_pf"
    assert {p.name for p in folder.iterdir()} == {"trace.csv", "report.json", "summary.json"}
    assert "equilibrium_pf: ok" in capsys.readouterr().out


def test_invalid_scenario_exits_4_without_output(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(MINIMAL.replace("dt = 0.1", "dt = -0.1"))
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(bad), "--out", str(out)]) == 4
    assert not out.exists()
    assert "dt must be > 0" in capsys.readouterr().err


def test_missing_scenario_exits_3(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 3


def test_unwritable_output_exits_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--scenario", "equilibrium_pf", "--steps", "1", "--out", str(blocker)]) == 3


def test_engine_halt_exits_2(tmp_path, capsys):
    bad = tmp_path / "halt.ini"
    bad.write_text(MINIMAL + "\n[initial]\nspacing_errors = [0.0, 50.0]\n")
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "diagnostic" in capsys.readouterr().err


def test_compare(tmp_path, capsys):
    for name in ("a", "b"):
        sc = tmp_path / f"{name}.ini"
        sc.write_text(MINIMAL.replace("[run]", f'[run]\nname = "{name}"'))
        assert main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o"), "--no-monitor"]) == 0
    capsys.readouterr()
    files = [str(tmp_path / "o" / n / "summary.json") for n in ("a", "b")]
    assert main(["compare", *files]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and lines[2].startswith("a") and lines[3].startswith("b")
    assert main(["compare", "--format", "csv", files[0]]) == 0
    assert capsys.readouterr().out.startswith("name,topology")
    assert main(["compare", str(tmp_path / "missing.json")]) == 3


def test_topo_analyze(capsys):
    assert main(["topo", "analyze", "--scenario", "ramp_plf"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["topology"] == "PLF" and rep["nilpotency_degree"] == 7


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "platoon_dmpc.cli", "presets", "list"], capture_output=True, text=True)
    assert out.returncode == 0 and "const_pf" in out.stdout


def test_usage_error():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
