import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
import yaml

from detector_readout import ConfigError, __version__
from detector_readout.cli import (
    ENV_OUTPUT_DIR,
    TOLERANCES,
    ComparisonReport,
    load_config,
    main,
    run_config,
    validate_config,
)

CONFIGS = resources.files("detector_readout") / "configs"
SHIPPED = ["oscillator_readout", "fermion_readout", "wick_dichotomy", "continuation_check"]

SMALL_LATTICE = """\
format_version: 1
name: small_lattice
system:
  detector:
    omega_d: 1.0
    bath: {type: discrete, modes: [{c: 0.1, omega: 1.1}]}
  simulator: {type: lattice, L: 2, boundary: open}
  coupling: {lambda: [0.05, 0.1]}
grid: {beta: 2.0, statistics: bosonic, N: 3}
tasks: [oracle, extract, compare]
"""


def shipped(name):
    return str(CONFIGS / f"{name}.yaml")


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def edited(name, fn):
    data = yaml.safe_load(Path(shipped(name)).read_text())
    fn(data)
    return yaml.safe_dump(data, sort_keys=False)


def errors_of(text):
    from detector_readout.cli import _parse_yaml

    data, marks = _parse_yaml(text)
    return validate_config(data, marks)[1]


# -- validation --------------------------------------------------------------


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_validate(name):
    data = yaml.safe_load(Path(shipped(name)).read_text())
    cfg, errs = validate_config(data)
    assert errs == [] and cfg.name == name


def test_validate_command_reports_json(capsys):
    assert main(["validate", shipped("oscillator_readout")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["errors"] == [] and report["tasks"] == ["bare", "dressed", "extract", "compare"]


def test_missing_beta_names_field_and_line(tmp_path, capsys):
    text = Path(shipped("oscillator_readout")).read_text().replace("beta: 5.0, ", "")
    errs = errors_of(text)
    assert [e.path for e in errs] == ["grid.beta"]
    assert errs[0].line is not None
    assert main(["validate", write(tmp_path, text)]) == 1
    assert json.loads(capsys.readouterr().out)["errors"][0]["path"] == "grid.beta"


@pytest.mark.parametrize("edit, path", [
    (lambda d: d["system"]["detector"].update(omega_d=-1.0), "system.detector.omega_d"),
    (lambda d: d["grid"].update(N=0), "grid.N"),
    (lambda d: d["grid"].update(statistics="fermionic"), "grid.statistics"),
    (lambda d: d.update(tasks=["bare", "sing"]), "tasks[1]"),
    (lambda d: d.update(format_version=7), "format_version"),
    (lambda d: d["system"]["simulator"].update(colour="red"), "system.simulator.colour"),
    (lambda d: d["modes"].update(bath_mode="sideways"), "modes.bath_mode"),
    (lambda d: d["tolerances"].update(bogus=1.0), "tolerances.bogus"),
])
def test_schema_errors_name_the_field(edit, path):
    errs = errors_of(edited("oscillator_readout", edit))
    assert path in [e.path for e in errs]


def test_all_errors_reported_together():
    def edit(d):
        d["grid"]["N"] = -1
        d["system"]["coupling"]["lambda"] = "big"

    assert {e.path for e in errors_of(edited("oscillator_readout", edit))} >= {"grid.N", "system.coupling.lambda"}


def test_yaml_syntax_error_has_position(tmp_path, capsys):
    assert main(["run", write(tmp_path, "grid: {beta: 5.0\n  tasks: [")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("config error:") and "line" in err


def test_dimension_preflight(tmp_path):
    def edit(d):
        d["system"]["truncation"] = {"n_max_cavity": 40, "n_max_bath_mode": 40, "energy_cap": None}
        d["system"]["dimension_budget"] = 1000

    errs = errors_of(edited("fermion_readout", edit))
    assert any("1000" in str(e) for e in errs)


def test_prerequisites_are_inserted():
    data = yaml.safe_load(Path(shipped("oscillator_readout")).read_text())
    data["tasks"] = ["compare"]
    cfg, errs = validate_config(data)
    assert errs == []
    assert cfg.tasks == ["bare", "dressed", "extract", "compare"]
    assert cfg.auto_inserted == ["bare", "dressed", "extract"]


def test_tolerance_overrides():
    data = yaml.safe_load(Path(shipped("oscillator_readout")).read_text())
    cfg, _ = validate_config(data, overrides={"pole": 0.5})
    assert cfg.tolerances["pole"] == 0.5 and cfg.tolerances["extraction"] == 1e-10
    assert cfg.tolerances["wick"] == TOLERANCES["wick"]
    _, errs = validate_config(data, overrides={"nonsense": 1.0})
    assert errs


def test_load_config_raises_first_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "format_version: 1\n"))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


# -- reports -----------------------------------------------------------------


@pytest.mark.parametrize("kind, tol, rel, expected", [
    ("match", 1e-3, [1e-4, 5e-4], True),
    ("match", 1e-3, [1e-4, 2e-3], False),
    ("differ", 1e-8, [2e-2], True),
    ("differ", 1e-8, [1e-12], False),
    ("match", None, [5.0], None),
])
def test_comparison_report_verdicts(kind, tol, rel, expected):
    r = ComparisonReport(("a", "b"), np.array(rel), np.array(rel), "x" if tol else None, tol, kind)
    assert r.passed is expected
    assert r.line().split()[0] == {True: "PASS", False: "FAIL", None: "INFO"}[expected]
    assert r.summary()["max_relative"] == max(rel)


# -- running -----------------------------------------------------------------


def test_oscillator_run_and_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", shipped("oscillator_readout"), "--output-dir", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("PASS extracted(lambda=0.1) vs C_S0")
    for name in ("bare/D_R0.csv", "bare/D_R0_tau.csv", "dressed/D_RB.csv", "dressed/D_R.csv",
                 "dressed/C_S0.csv", "extract/extracted.csv", "comparisons.json", "comparisons.csv",
                 "provenance.json"):
        assert (out / name).exists(), name
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["version"] == __version__ and prov["config"]["grid"]["beta"] == 5.0
    summary = json.loads((out / "comparisons.json").read_text())
    assert summary[0]["passed"] is True and summary[0]["max_relative"] < 1e-25


def test_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", shipped("continuation_check"), "--output-dir", str(a)]) == 0
    assert main(["run", shipped("continuation_check"), "--output-dir", str(b), "--threads", "1"]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_continuation_run(tmp_path, capsys):
    assert main(["run", shipped("continuation_check"), "--output-dir", str(tmp_path)]) == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert line.startswith("PASS D_RB_pade(lambda=0.1) vs D_RB_closed_form")


def test_wick_run(tmp_path, capsys):
    assert main(["run", shipped("wick_dichotomy"), "--output-dir", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("PASS wick_residual[OscillatorSpec]")
    assert lines[1].startswith("PASS wick_residual[LatticeSpec]") and "> 1e-08" in lines[1]


def test_small_lattice_run(tmp_path, capsys):
    assert main(["run", write(tmp_path, SMALL_LATTICE), "--output-dir", str(tmp_path / "o")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("INFO extracted(lambda=0.05) vs C_S0")
    assert any(x.startswith("PASS norm ratio lambda=0.1/0.05") for x in lines)
    assert (tmp_path / "o" / "extract" / "lambda_0.05" / "extracted.csv").exists()


def test_failed_comparison_exits_2(tmp_path, capsys):
    status = main(["run", shipped("oscillator_readout"), "--output-dir", str(tmp_path), "--tolerance", "extraction=1e-40"])
    assert status == 2
    assert capsys.readouterr().out.startswith("FAIL")


def test_lambda_zero_extraction_exits_1(tmp_path, capsys):
    text = edited("oscillator_readout", lambda d: d["system"]["coupling"].update({"lambda": 0.0}))
    assert main(["run", write(tmp_path, text), "--output-dir", str(tmp_path / "o")]) == 1
    assert "ExtractionError" in capsys.readouterr().err


def test_output_dir_precedence(tmp_path, monkeypatch):
    text = edited("continuation_check", lambda d: d.pop("output_dir", None))
    cfgfile = write(tmp_path, text)
    monkeypatch.setenv(ENV_OUTPUT_DIR, str(tmp_path / "env"))
    assert main(["run", cfgfile]) == 0
    assert (tmp_path / "env" / "provenance.json").exists()
    text = edited("continuation_check", lambda d: d.update(output_dir=str(tmp_path / "cfg")))
    assert main(["run", write(tmp_path, text, "d.yaml")]) == 0
    assert (tmp_path / "cfg" / "provenance.json").exists()


def test_bad_thread_count(tmp_path, capsys):
    assert main(["run", shipped("continuation_check"), "--output-dir", str(tmp_path), "--threads", "0"]) == 1


def test_bad_tolerance_syntax(tmp_path):
    assert main(["run", shipped("continuation_check"), "--output-dir", str(tmp_path), "--tolerance", "pole"]) == 1


def test_run_config_api(tmp_path):
    status, reports = run_config(load_config(shipped("oscillator_readout")), tmp_path)
    assert status == 0 and all(r.passed for r in reports)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "detector_readout", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
