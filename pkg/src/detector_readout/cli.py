"""Scenario runner: ``detector-readout run|validate <config.yaml>``.

A config is a YAML file (format version 1)::

    format_version: 1
    system:
      detector: {omega_d: 1.0, bath: {type: flat, kappa: 0.1}}
      simulator: {type: oscillator, omega_s: 0.8}
      coupling: {lambda: 0.1}            # or a list of couplings
      truncation: {energy_cap: auto}     # ED only
    grid: {beta: 5.0, statistics: bosonic, N: 256}
    tasks: [dressed, extract, compare]
    modes: {bath_mode: paper_literal, mean_subtract: true, tail_correction: true}
    tolerances: {extraction: 1.0e-10}

Exit status: 0 when every comparison passes, 2 when one fails, 1 on any
configuration or execution error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import mpmath
import numpy as np
import scipy
import yaml

from . import __version__
from .bare import (
    BathMode,
    CouplingSpec,
    DetectorSpec,
    DiscreteBath,
    FlatBath,
    LatticeSpec,
    OscillatorSpec,
    cavity_bare,
    local_density_bubble,
    oscillator_bare,
)
from .continuation import (
    cavity_bare_form,
    flat_bath_form,
    oscillator_form,
    pade_continue,
    pade_fit,
    pade_poles,
    retarded_from_form,
    retarded_to_csv,
    retarded_to_json,
)
from .dyson import DressedSet, extract, fermion_readout, oscillator_readout, save_dressed
from .ed import (
    SystemSpec,
    Truncation,
    build_hamiltonian,
    readout_experiment,
    resolve_truncation,
    solve_spectrum,
    wick_residual,
)
from .errors import ConfigError, DimensionError, ReadoutError
from .grid import freq_to_tau, make_grid, series_to_csv, series_to_json

__all__ = [
    "CONFIG_VERSION",
    "TASKS",
    "TOLERANCES",
    "ScenarioConfig",
    "ComparisonReport",
    "load_config",
    "validate_config",
    "run_config",
    "main",
    "ENV_OUTPUT_DIR",
]

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
ENV_OUTPUT_DIR = "DETECTOR_READOUT_OUTPUT_DIR"
TASKS = ("bare", "dressed", "extract", "oracle", "wick", "continue", "compare")
TOLERANCES = {
    "extraction": 1e-10,      # max relative deviation, extracted vs C_S0 (oscillator simulators)
    "lambda_ratio": 0.15,     # allowed relative miss of the deviation-norm ratio from 4
    "wick": 1e-10,            # residual bound for quadrature operators
    "wick_floor": 1e-8,       # residual a non-Wick operator must exceed
    "continuation": 1e-4,     # Pade vs closed-form retarded, max relative deviation
    "pole": 0.01,             # relative miss of the continued pole from omega_s
    "truncation": 1e-6,       # ED cutoff +4 check
    "pade_gate": 1e-8,        # Pade fit-quality gate
}


# ---------------------------------------------------------------------------
# config parsing


@dataclass
class ScenarioConfig:
    """Validated scenario; ``raw`` keeps the config with defaults filled in."""

    detector: DetectorSpec
    simulator: object
    couplings: list
    truncation: Truncation
    truncation_check: bool
    dimension_budget: int
    grid: object
    tasks: list
    auto_inserted: list
    modes: dict
    tolerances: dict
    output_dir: str | None
    seed: int
    wick: dict
    continuation: dict
    dps: int | None
    name: str = ""
    raw: dict = field(default_factory=dict)


class _Errors:
    def __init__(self, marks):
        self.items = []
        self.marks = marks

    def add(self, path, message):
        # a missing field has no position of its own; point at the nearest enclosing mapping
        key = path
        while key and key not in self.marks:
            key = key.rpartition(".")[0]
        line, col = self.marks.get(key, (None, None))
        self.items.append(ConfigError(f"{path}: {message}" if path else message, path, line, col))


def _marks(node, prefix="", out=None):
    """Map dotted field paths to 1-based (line, column) of their YAML nodes."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[path] = (key.start_mark.line + 1, key.start_mark.column + 1)
            _marks(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = (value.start_mark.line + 1, value.start_mark.column + 1)
            _marks(value, path, out)
    return out


def _parse_yaml(text: str, path: str = "<config>"):
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (None, None)
        raise ConfigError(f"{path}:{line}:{col}: {exc.problem}", None, line, col) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data, _marks(node)


def _number(errs, d, key, path, default=None, positive=False, nonneg=False, required=False):
    full = f"{path}.{key}" if path else key
    if key not in d or d[key] is None:
        if required:
            errs.add(full, "required field missing")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        errs.add(full, f"expected a finite number, got {v!r}")
        return default
    if positive and not v > 0:
        errs.add(full, f"must be positive, got {v}")
        return default
    if nonneg and v < 0:
        errs.add(full, f"must be non-negative, got {v}")
        return default
    return float(v)


def _integer(errs, d, key, path, default=None, minimum=None, required=False):
    full = f"{path}.{key}" if path else key
    if key not in d or d[key] is None:
        if required:
            errs.add(full, "required field missing")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        errs.add(full, f"expected an integer, got {v!r}")
        return default
    if minimum is not None and v < minimum:
        errs.add(full, f"must be >= {minimum}, got {v}")
        return default
    return v


def _choice(errs, d, key, path, choices, default):
    full = f"{path}.{key}" if path else key
    v = d.get(key, default)
    if v not in choices:
        errs.add(full, f"must be one of {list(choices)}, got {v!r}")
        return default
    return v


def _boolean(errs, d, key, path, default):
    v = d.get(key, default)
    if not isinstance(v, bool):
        errs.add(f"{path}.{key}", f"expected true or false, got {v!r}")
        return default
    return v


def _mapping(errs, d, key, path, required=False, allowed=None):
    full = f"{path}.{key}" if path else key
    if key not in d or d[key] is None:
        if required:
            errs.add(full, "required section missing")
        return {}
    v = d[key]
    if not isinstance(v, dict):
        errs.add(full, "expected a mapping")
        return {}
    if allowed is not None:
        for k in v:
            if k not in allowed:
                errs.add(f"{full}.{k}", f"unknown field (allowed: {sorted(allowed)})")
    return v


def _build(errs, path, factory, fallback, *args):
    try:
        return factory(*args)
    except ReadoutError as exc:
        errs.add(path, str(exc))
        return fallback


def _parse_bath(errs, det):
    bath = _mapping(errs, det, "bath", "system.detector", allowed={"type", "kappa", "delta_omega_d", "modes"})
    kind = _choice(errs, bath, "type", "system.detector.bath", ("flat", "discrete", "none"), "none")
    if kind == "flat":
        kappa = _number(errs, bath, "kappa", "system.detector.bath", 0.0, nonneg=True, required=True)
        dw = _number(errs, bath, "delta_omega_d", "system.detector.bath", 0.0)
        return _build(errs, "system.detector.bath", FlatBath, FlatBath(0.0), kappa, dw)
    if kind == "discrete":
        modes = bath.get("modes", [])
        if not isinstance(modes, list):
            errs.add("system.detector.bath.modes", "expected a list")
            modes = []
        out = []
        for i, m in enumerate(modes):
            p = f"system.detector.bath.modes[{i}]"
            if not isinstance(m, dict):
                errs.add(p, "expected a mapping with c and omega")
                continue
            c = _number(errs, m, "c", p, 0.0, required=True)
            w = _number(errs, m, "omega", p, 1.0, positive=True, required=True)
            out.append(_build(errs, p, BathMode, BathMode(0.0, 1.0), c, w))
        return DiscreteBath(tuple(out))
    return DiscreteBath(())


_SIMULATOR_FIELDS = {"type", "omega_s", "L", "hopping", "mu", "spin", "probe_site", "boundary"}


def _parse_simulator(errs, sim, path, extra=()):
    if not sim:
        return OscillatorSpec(1.0)
    for k in sim:
        if k not in _SIMULATOR_FIELDS | set(extra):
            errs.add(f"{path}.{k}", f"unknown field (allowed: {sorted(_SIMULATOR_FIELDS | set(extra))})")
    kind = _choice(errs, sim, "type", path, ("oscillator", "lattice"), "oscillator")
    if kind == "oscillator":
        w = _number(errs, sim, "omega_s", path, 1.0, positive=True, required=True)
        return _build(errs, f"{path}.omega_s", OscillatorSpec, OscillatorSpec(1.0), w)
    L = _integer(errs, sim, "L", path, 2, minimum=1, required=True)
    hopping = _number(errs, sim, "hopping", path, 1.0)
    mu = _number(errs, sim, "mu", path, 0.0)
    spin = _choice(errs, sim, "spin", path, ("spinless", "spinhalf"), "spinless")
    boundary = _choice(errs, sim, "boundary", path, ("periodic", "open"), "periodic")
    probe = _integer(errs, sim, "probe_site", path, 1, minimum=1)
    if probe > L:
        errs.add(f"{path}.probe_site", f"must lie in 1..{L}")
        probe = 1
    return _build(errs, path, LatticeSpec, LatticeSpec(2), L, hopping, mu, spin, probe, boundary)


def _parse_truncation(errs, system):
    t = _mapping(errs, system, "truncation", "system", allowed={
        "n_max_cavity", "n_max_oscillator", "n_max_bath_mode", "thermal_tol", "dressed", "energy_cap", "check"})
    p = "system.truncation"
    cav = _integer(errs, t, "n_max_cavity", p, None, minimum=1)
    osc = _integer(errs, t, "n_max_oscillator", p, None, minimum=1)
    bath = t.get("n_max_bath_mode")
    if isinstance(bath, list):
        if not all(isinstance(b, int) and not isinstance(b, bool) and b >= 1 for b in bath):
            errs.add(f"{p}.n_max_bath_mode", "entries must be integers >= 1")
            bath = None
        else:
            bath = tuple(bath)
    elif bath is not None:
        bath = _integer(errs, t, "n_max_bath_mode", p, None, minimum=1)
    tol = _number(errs, t, "thermal_tol", p, 1e-12, positive=True)
    dressed = _boolean(errs, t, "dressed", p, True)
    cap = t.get("energy_cap")
    if cap is not None and cap != "auto":
        cap = _number(errs, t, "energy_cap", p, None, positive=True)
    check = _boolean(errs, t, "check", p, False)
    return _build(errs, p, Truncation, Truncation(), cav, osc, bath, tol, dressed, cap), check


def _insert_prerequisites(tasks):
    """Return the task list with missing prerequisites inserted, and what was inserted."""
    out, inserted = [], []

    def need(name):
        out.append(name)
        inserted.append(name)

    for task in tasks:
        if task == "dressed" and "bare" not in out:
            need("bare")
        if task == "extract" and not ({"dressed", "oracle"} & set(out)):
            if "bare" not in out:
                need("bare")
            need("dressed")
        if task == "continue" and not ({"dressed", "oracle"} & set(out)):
            if "bare" not in out:
                need("bare")
            need("dressed")
        if task == "compare" and not ({"extract", "wick", "continue"} & set(out)):
            if not ({"dressed", "oracle"} & set(out)):
                if "bare" not in out:
                    need("bare")
                need("dressed")
            need("extract")
        out.append(task)
    return out, inserted


def validate_config(data: dict, marks=None, overrides: dict | None = None) -> tuple[ScenarioConfig | None, list]:
    """Schema and invariant check; returns the parsed config (or None) and the error list."""
    errs = _Errors(marks or {})
    allowed = {"format_version", "name", "system", "grid", "tasks", "modes", "tolerances", "output_dir",
               "seed", "wick", "continuation", "precision"}
    for k in data:
        if k not in allowed:
            errs.add(k, f"unknown field (allowed: {sorted(allowed)})")
    version = data.get("format_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        errs.add("format_version", f"unsupported format version {version!r} (this build reads {CONFIG_VERSION})")

    system = _mapping(errs, data, "system", "", required=True,
                      allowed={"detector", "simulator", "coupling", "truncation", "dimension_budget"})
    det = _mapping(errs, system, "detector", "system", required=bool(system), allowed={"omega_d", "bath"})
    omega_d = _number(errs, det, "omega_d", "system.detector", 1.0, positive=True, required=bool(det))
    detector = _build(errs, "system.detector.omega_d", DetectorSpec, DetectorSpec(1.0, DiscreteBath(())),
                      omega_d, _parse_bath(errs, det))
    sim_raw = _mapping(errs, system, "simulator", "system", required=bool(system))
    simulator = _parse_simulator(errs, sim_raw, "system.simulator")
    coupling = _mapping(errs, system, "coupling", "system", required=bool(system), allowed={"lambda"})
    lam = coupling.get("lambda", None)
    couplings = lam if isinstance(lam, list) else [lam]
    parsed = []
    for i, v in enumerate(couplings):
        p = "system.coupling.lambda" + (f"[{i}]" if isinstance(lam, list) else "")
        if v is None:
            if coupling:
                errs.add(p, "required field missing")
            continue
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            errs.add(p, f"expected a finite number, got {v!r}")
            continue
        parsed.append(float(v))
    truncation, check = _parse_truncation(errs, system)
    budget = _integer(errs, system, "dimension_budget", "system", 20_000, minimum=1)

    g = _mapping(errs, data, "grid", "", required=True, allowed={"beta", "statistics", "N"})
    n_errs = len(errs.items)
    beta = _number(errs, g, "beta", "grid", 1.0, positive=True, required=bool(g) or "grid" not in data)
    beta_ok = len(errs.items) == n_errs
    stats = _choice(errs, g, "statistics", "grid", ("bosonic", "fermionic"), "bosonic")
    if stats != "bosonic":
        errs.add("grid.statistics", "detector and simulator correlators are bosonic")
    N = _integer(errs, g, "N", "grid", 16, minimum=1, required=bool(g))

    tasks = data.get("tasks")
    if not isinstance(tasks, list) or not tasks:
        errs.add("tasks", "expected a non-empty list of tasks")
        tasks = []
    for i, t in enumerate(tasks):
        if t not in TASKS:
            errs.add(f"tasks[{i}]", f"unknown task {t!r} (allowed: {list(TASKS)})")
    tasks = [t for t in tasks if t in TASKS]
    full_tasks, inserted = _insert_prerequisites(tasks)

    modes_raw = _mapping(errs, data, "modes", "", allowed={"bath_mode", "mean_subtract", "tail_correction"})
    modes = {
        "bath_mode": _choice(errs, modes_raw, "bath_mode", "modes", ("paper_literal", "symmetric"), "paper_literal"),
        "mean_subtract": _boolean(errs, modes_raw, "mean_subtract", "modes", True),
        "tail_correction": _boolean(errs, modes_raw, "tail_correction", "modes", True),
    }

    tol_raw = _mapping(errs, data, "tolerances", "")
    tolerances = dict(TOLERANCES)
    for k in tol_raw:
        if k not in TOLERANCES:
            errs.add(f"tolerances.{k}", f"unknown tolerance (allowed: {sorted(TOLERANCES)})")
        else:
            tolerances[k] = _number(errs, tol_raw, k, "tolerances", TOLERANCES[k], positive=True)
    for k, v in (overrides or {}).items():
        if k not in TOLERANCES:
            errs.add(f"--tolerance {k}", f"unknown tolerance (allowed: {sorted(TOLERANCES)})")
        elif not (isinstance(v, float) and v > 0):
            errs.add(f"--tolerance {k}", f"must be a positive number, got {v!r}")
        else:
            tolerances[k] = v

    out_dir = data.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        errs.add("output_dir", "expected a path string")
        out_dir = None
    seed = _integer(errs, data, "seed", "", 0)

    wick_raw = _mapping(errs, data, "wick", "", allowed={"taus", "simulators"})
    taus = wick_raw.get("taus", [0.2, 0.6, 1.0, 1.4])
    if not (isinstance(taus, list) and len(taus) == 4 and all(isinstance(t, (int, float)) for t in taus)):
        errs.add("wick.taus", "expected four imaginary times")
        taus = [0.2, 0.6, 1.0, 1.4]
    elif beta_ok and not all(0 < t < beta for t in taus):
        errs.add("wick.taus", f"times must lie in (0, beta={beta})")
    elif len(set(taus)) != 4:
        errs.add("wick.taus", "times must be distinct")
    cases = []
    sims = wick_raw.get("simulators")
    if sims is None:
        cases.append({"simulator": simulator, "n_max": truncation.n_max_oscillator})
    elif not isinstance(sims, list):
        errs.add("wick.simulators", "expected a list")
    else:
        for i, s in enumerate(sims):
            p = f"wick.simulators[{i}]"
            if not isinstance(s, dict):
                errs.add(p, "expected a mapping")
                continue
            cases.append({"simulator": _parse_simulator(errs, s, p, ("n_max",)), "n_max": _integer(errs, s, "n_max", p, None, 1)})
    wick = {"taus": [float(t) for t in taus], "cases": cases}

    cont_raw = _mapping(errs, data, "continuation", "", allowed={"series", "order", "eta", "omega"})
    series = _choice(errs, cont_raw, "series", "continuation", ("D_R0", "D_RB", "D_R", "C_S0", "extracted"), "D_RB")
    order = _integer(errs, cont_raw, "order", "continuation", 6, minimum=1)
    if "continue" in full_tasks and order > N:
        errs.add("continuation.order", f"order {order} exceeds the {N} positive frequencies")
    eta = _number(errs, cont_raw, "eta", "continuation", 1e-3 * omega_d, positive=True)
    om = _mapping(errs, cont_raw, "omega", "continuation", allowed={"start", "stop", "num"})
    window = (_number(errs, om, "start", "continuation.omega", 0.5 * omega_d),
              _number(errs, om, "stop", "continuation.omega", 1.5 * omega_d),
              _integer(errs, om, "num", "continuation.omega", 201, minimum=2))
    if series == "extracted" and "extract" not in full_tasks:
        errs.add("continuation.series", "continuing 'extracted' needs an extract task")
    continuation = {"series": series, "order": order, "eta": eta, "omega": list(window)}
    prec = _mapping(errs, data, "precision", "", allowed={"dps"})
    dps = _integer(errs, prec, "dps", "precision", None, minimum=16)

    if "oracle" in full_tasks and not isinstance(detector.bath, DiscreteBath):
        errs.add("system.detector.bath.type", "the oracle task needs a discrete bath")
    if "oracle" in full_tasks and isinstance(detector.bath, DiscreteBath) and not errs.items:
        for lam_v in parsed or [0.0]:
            _preflight(errs, detector, simulator, lam_v, beta, truncation, budget, modes["mean_subtract"])

    if errs.items:
        return None, errs.items
    cfg = ScenarioConfig(
        detector, simulator, parsed, truncation, check, budget, make_grid(beta, stats, N), full_tasks, inserted,
        modes, tolerances, out_dir, seed, wick, continuation, dps, str(data.get("name", "")),
    )
    cfg.raw = _resolved_record(cfg)
    return cfg, []


def _preflight(errs, detector, simulator, lam, beta, truncation, budget, mean_subtract):
    spec = SystemSpec(detector, simulator, CouplingSpec(lam), beta, truncation, budget, mean_subtract)
    try:
        t = resolve_truncation(spec)
        dims = [t.n_max_cavity + 1] + [b + 1 for b in t.n_max_bath_mode]
        if isinstance(simulator, OscillatorSpec):
            dims.append(t.n_max_oscillator + 1)
        else:
            dims.append(2 ** (simulator.L * simulator.n_spin))
        size = int(np.prod(dims, dtype=np.int64))
        if t.energy_cap is None and size > budget:
            raise DimensionError(f"Hilbert dimension {size} ({' x '.join(map(str, dims))}) exceeds budget {budget}",
                                 dimension=size)
        if t.energy_cap is not None:
            build_hamiltonian(spec)
    except DimensionError as exc:
        errs.add("system.truncation", f"pre-flight: {exc}")


def _resolved_record(cfg: ScenarioConfig) -> dict:
    def sim_record(sim):
        if isinstance(sim, OscillatorSpec):
            return {"type": "oscillator", "omega_s": sim.omega_s}
        return {"type": "lattice", "L": sim.L, "hopping": sim.hopping, "mu": sim.mu, "spin": sim.spin,
                "probe_site": sim.probe_site, "boundary": sim.boundary}

    bath = cfg.detector.bath
    if isinstance(bath, FlatBath):
        bath_rec = {"type": "flat", "kappa": bath.kappa, "delta_omega_d": bath.delta_omega_d}
    else:
        bath_rec = {"type": "discrete", "modes": [{"c": m.c, "omega": m.omega} for m in bath.modes]}
    t = cfg.truncation
    return {
        "format_version": CONFIG_VERSION,
        "name": cfg.name,
        "system": {
            "detector": {"omega_d": cfg.detector.omega_d, "bath": bath_rec},
            "simulator": sim_record(cfg.simulator),
            "coupling": {"lambda": cfg.couplings},
            "truncation": {"n_max_cavity": t.n_max_cavity, "n_max_oscillator": t.n_max_oscillator,
                           "n_max_bath_mode": list(t.n_max_bath_mode) if isinstance(t.n_max_bath_mode, tuple)
                           else t.n_max_bath_mode, "thermal_tol": t.thermal_tol, "dressed": t.dressed,
                           "energy_cap": t.energy_cap, "check": cfg.truncation_check},
            "dimension_budget": cfg.dimension_budget,
        },
        "grid": {"beta": cfg.grid.beta, "statistics": cfg.grid.statistics.value, "N": cfg.grid.N},
        "tasks": cfg.tasks,
        "auto_inserted": cfg.auto_inserted,
        "modes": cfg.modes,
        "tolerances": cfg.tolerances,
        "seed": cfg.seed,
        "wick": {"taus": cfg.wick["taus"],
                 "simulators": [dict(sim_record(c["simulator"]), n_max=c["n_max"]) for c in cfg.wick["cases"]]},
        "continuation": cfg.continuation,
        "precision": {"dps": cfg.dps},
    }


def load_config(path, overrides: dict | None = None) -> ScenarioConfig:
    """Read and validate a config file; raises the first :class:`ConfigError`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    data, marks = _parse_yaml(text, str(path))
    cfg, errors = validate_config(data, marks, overrides)
    if errors:
        raise errors[0]
    return cfg


# ---------------------------------------------------------------------------
# comparisons


@dataclass
class ComparisonReport:
    """Per-point deviations between two labelled quantities.

    ``kind="match"`` passes when the largest relative deviation is within
    ``tolerance``; ``kind="differ"`` passes when it exceeds it. Reports with
    ``tolerance_name=None`` are informational and never fail.
    """

    labels: tuple
    absolute: np.ndarray
    relative: np.ndarray
    tolerance_name: str | None = None
    tolerance: float | None = None
    kind: str = "match"
    context: dict = field(default_factory=dict)

    @property
    def max_relative(self) -> float:
        return float(np.max(self.relative)) if len(self.relative) else 0.0

    @property
    def mean_relative(self) -> float:
        return float(np.mean(self.relative)) if len(self.relative) else 0.0

    @property
    def passed(self) -> bool | None:
        if self.tolerance is None:
            return None
        if self.kind == "differ":
            return self.max_relative > self.tolerance
        return self.max_relative <= self.tolerance

    def summary(self) -> dict:
        return {
            "labels": list(self.labels),
            "kind": self.kind,
            "max_relative": self.max_relative,
            "mean_relative": self.mean_relative,
            "max_absolute": float(np.max(self.absolute)) if len(self.absolute) else 0.0,
            "tolerance_name": self.tolerance_name,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "context": self.context,
        }

    def line(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "INFO"}[self.passed]
        tol = "" if self.tolerance is None else f" ({'>' if self.kind == 'differ' else '<='} {self.tolerance:g})"
        return f"{status} {self.labels[0]} vs {self.labels[1]}: max rel {self.max_relative:.3e}{tol}"


def compare_series(a, b, tolerance_name=None, tolerance=None, context=None) -> ComparisonReport:
    x, y = a.to_complex(), b.to_complex()
    absdev = np.abs(x - y)
    return ComparisonReport((a.label, b.label), absdev, absdev / np.abs(y), tolerance_name, tolerance,
                            context=dict(context or {}, n=[int(n) for n in a.grid.indices]))


# ---------------------------------------------------------------------------
# execution


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return str(obj)


def _lam_dir(root: Path, lam: float, many: bool) -> Path:
    d = root / f"lambda_{lam!r}" if many else root
    d.mkdir(parents=True, exist_ok=True)
    return d


class _Runner:
    def __init__(self, cfg: ScenarioConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.bare = {}
        self.per_lambda = {lam: {} for lam in cfg.couplings}
        self.wick = []
        self.continued = {}
        self.reports = []
        self.files = []

    @property
    def many(self):
        return len(self.cfg.couplings) > 1

    def write_series(self, directory: Path, series, name: str):
        for suffix, writer in ((".csv", series_to_csv), (".json", series_to_json)):
            p = directory / f"{name}{suffix}"
            writer(series, p)
            self.files.append(p)

    # tasks ---------------------------------------------------------------

    def task_bare(self):
        cfg = self.cfg
        d0 = cavity_bare(cfg.detector.omega_d, cfg.grid)
        if isinstance(cfg.simulator, OscillatorSpec):
            cs0 = oscillator_bare(cfg.simulator.omega_s, cfg.grid)
        else:
            cs0 = local_density_bubble(cfg.simulator, cfg.grid)
        self.bare = {"D_R0": d0, "C_S0": cs0}
        bdir = self.out / "bare"
        bdir.mkdir(parents=True, exist_ok=True)
        for name, s in self.bare.items():
            self.write_series(bdir, s, name)
        # tau-domain export of the bare detector correlator
        tail = cfg.modes["tail_correction"]
        M = 64
        tau = np.linspace(0.0, cfg.grid.beta, M + 1) if tail else np.linspace(0.0, cfg.grid.beta, M + 1)[1:-1]
        ts = freq_to_tau(d0, tau, tail_correction=tail)
        lines = ["tau,re,im"] + [f"{t!r},{v.real!r},{v.imag!r}" for t, v in zip(ts.tau_points, ts.values)]
        p = bdir / "D_R0_tau.csv"
        p.write_text("\n".join(lines) + "\n")
        self.files.append(p)

    def task_dressed(self):
        cfg = self.cfg
        for lam in cfg.couplings:
            if isinstance(cfg.simulator, OscillatorSpec):
                ds = oscillator_readout(cfg.detector, cfg.simulator, lam, cfg.grid, cfg.modes["bath_mode"], cfg.dps)
            else:
                ds = fermion_readout(cfg.detector, cfg.simulator, lam, cfg.grid, cfg.modes["bath_mode"])
            ds = DressedSet(ds.D_R0, ds.D_RB, ds.D_R, ds.C_S0, ds.C_S, None, ds.provenance)
            self.per_lambda[lam]["dressed"] = ds
            self.per_lambda[lam]["source"] = "dressed"
            d = _lam_dir(self.out / "dressed", lam, self.many)
            self.files += save_dressed(ds, d)

    def task_oracle(self):
        cfg = self.cfg
        for lam in cfg.couplings:
            spec = SystemSpec(cfg.detector, cfg.simulator, CouplingSpec(lam), cfg.grid.beta, cfg.truncation,
                              cfg.dimension_budget, cfg.modes["mean_subtract"])
            rep = readout_experiment(spec, cfg.grid, check_convergence=cfg.truncation_check,
                                     truncation_tol=cfg.tolerances["truncation"])
            ds = rep.dressed
            self.per_lambda[lam]["oracle"] = rep
            self.per_lambda[lam]["dressed"] = DressedSet(ds.D_R0, ds.D_RB, ds.D_R, ds.C_S0, ds.C_S, None,
                                                         ds.provenance)
            self.per_lambda[lam]["source"] = "oracle"
            d = _lam_dir(self.out / "oracle", lam, self.many)
            self.files += save_dressed(self.per_lambda[lam]["dressed"], d)
            extra = {"conditioning": rep.conditioning, "truncation_check": rep.convergence}
            p = d / "oracle_report.json"
            _dump(p, extra)
            self.files.append(p)

    def task_extract(self):
        for lam in self.cfg.couplings:
            ds = self.per_lambda[lam]["dressed"]
            ext = extract(ds.D_RB, ds.D_R, lam).relabel("extracted")
            self.per_lambda[lam]["extracted"] = ext
            d = _lam_dir(self.out / "extract", lam, self.many)
            self.write_series(d, ext.as_double(), "extracted")

    def task_wick(self):
        cfg = self.cfg
        results = []
        for case in cfg.wick["cases"]:
            sim = case["simulator"]
            trunc = Truncation(n_max_oscillator=case["n_max"]) if isinstance(sim, OscillatorSpec) else Truncation()
            spec = SystemSpec(DetectorSpec(cfg.detector.omega_d, DiscreteBath(())), sim, CouplingSpec(0.0),
                              cfg.grid.beta, trunc, cfg.dimension_budget, mean_subtract=True)
            _, data, t = solve_spectrum(spec, include_detector=False, weight_floor=0.0)
            r = wick_residual(data, "O_S", np.array(cfg.wick["taus"]))
            rec = {"simulator": type(sim).__name__, "params": vars(sim).copy(), "taus": cfg.wick["taus"],
                   "residual": [r.real, r.imag], "abs_residual": abs(r),
                   "n_max_oscillator": t.n_max_oscillator}
            results.append(rec)
        self.wick = results
        p = self.out / "wick.json"
        _dump(p, results)
        self.files.append(p)

    def _series_for(self, lam, name):
        if name == "extracted":
            return self.per_lambda[lam]["extracted"]
        return getattr(self.per_lambda[lam]["dressed"], name)

    def _form_for(self, name):
        cfg = self.cfg
        if name == "D_R0":
            return cavity_bare_form(cfg.detector.omega_d)
        if name == "D_RB" and isinstance(cfg.detector.bath, FlatBath):
            return flat_bath_form(cfg.detector)
        if name in ("C_S0", "extracted") and isinstance(cfg.simulator, OscillatorSpec):
            return oscillator_form(cfg.simulator.omega_s)
        return None

    def task_continue(self):
        cfg = self.cfg
        c = cfg.continuation
        start, stop, num = c["omega"]
        omegas = np.linspace(start, stop, num)
        for lam in cfg.couplings:
            series = self._series_for(lam, c["series"]).as_double()
            approx = pade_fit(series, c["order"], gate=cfg.tolerances["pade_gate"])
            ret = pade_continue(approx, omegas, c["eta"], label=f"{c['series']}_pade")
            entry = {"pade": ret, "approx": approx}
            d = _lam_dir(self.out / "continue", lam, self.many)
            for suffix, writer in ((".csv", retarded_to_csv), (".json", retarded_to_json)):
                p = d / f"{c['series']}_pade{suffix}"
                writer(ret, p)
                self.files.append(p)
            form = self._form_for(c["series"])
            if form is not None:
                ref = retarded_from_form(form, omegas, c["eta"])
                entry["reference"] = ref
                for suffix, writer in ((".csv", retarded_to_csv), (".json", retarded_to_json)):
                    p = d / f"{c['series']}_closed_form{suffix}"
                    writer(ref, p)
                    self.files.append(p)
            poles = pade_poles(approx)
            entry["poles"] = poles
            p = d / "pade.json"
            _dump(p, {"order": approx.order, "effective_order": approx.effective_order,
                      "fit_deviation": approx.max_deviation, "holdout_deviation": approx.metadata["holdout_deviation"],
                      "poles": [[z.real, z.imag] for z in poles],
                      "coefficients": [[complex(a).real, complex(a).imag] for a in approx.coefficients]})
            self.files.append(p)
            self.continued[lam] = entry

    def task_compare(self):
        cfg = self.cfg
        tol = cfg.tolerances
        osc = isinstance(cfg.simulator, OscillatorSpec)
        reports = []
        extracted = {lam: v["extracted"] for lam, v in self.per_lambda.items() if "extracted" in v}
        for lam, ext in extracted.items():
            ref = self.per_lambda[lam]["dressed"].C_S0
            r = compare_series(ext, ref, "extraction" if osc else None, tol["extraction"] if osc else None,
                               {"lambda": lam, "source": self.per_lambda[lam]["source"]})
            r.labels = (f"extracted(lambda={lam})", "C_S0")
            reports.append(r)
        lams = sorted(extracted)
        if osc and len(lams) > 1:
            base = extracted[lams[0]]
            for lam in lams[1:]:
                r = compare_series(extracted[lam], base, "extraction", tol["extraction"], {"lambda": lam})
                r.labels = (f"extracted(lambda={lam})", f"extracted(lambda={lams[0]})")
                reports.append(r)
        if not osc:
            for small in lams:
                big = 2 * small
                match = [x for x in lams if math.isclose(x, big, rel_tol=1e-12)]
                if not match:
                    continue
                n_small = self._deviation_norm(small, extracted[small])
                n_big = self._deviation_norm(match[0], extracted[match[0]])
                ratio = n_big / n_small
                dev = abs(ratio / 4 - 1)
                reports.append(ComparisonReport(
                    (f"norm ratio lambda={match[0]}/{small}", "4"), np.array([abs(ratio - 4)]), np.array([dev]),
                    "lambda_ratio", tol["lambda_ratio"],
                    context={"ratio": ratio, "norm_small": n_small, "norm_big": n_big}))
        for rec in self.wick:
            quad = rec["simulator"] == "OscillatorSpec"
            val = np.array([rec["abs_residual"]])
            reports.append(ComparisonReport(
                (f"wick_residual[{rec['simulator']}]", "0"), val, val,
                "wick" if quad else "wick_floor", tol["wick"] if quad else tol["wick_floor"],
                kind="match" if quad else "differ", context={"params": rec["params"], "taus": rec["taus"]}))
        for lam, entry in self.continued.items():
            if "reference" in entry:
                a, b = entry["pade"].values, entry["reference"].values
                absdev = np.abs(a - b)
                reports.append(ComparisonReport(
                    (f"{entry['pade'].label}(lambda={lam})", entry["reference"].label + "_closed_form"),
                    absdev, absdev / np.abs(b), "continuation", tol["continuation"],
                    context={"eta": entry["pade"].eta}))
            if cfg.continuation["series"] in ("C_S0", "extracted") and osc:
                poles = entry["poles"]
                cand = poles[poles.real > 0] if np.any(poles.real > 0) else poles
                pole = cand[np.argmin(np.abs(cand.imag))] if len(cand) else np.nan
                dev = abs(pole.real - cfg.simulator.omega_s) / cfg.simulator.omega_s
                reports.append(ComparisonReport(
                    (f"pade pole(lambda={lam})", "omega_s"), np.array([abs(pole.real - cfg.simulator.omega_s)]),
                    np.array([dev]), "pole", tol["pole"], context={"pole": [pole.real, pole.imag]}))
        self.reports = reports
        summary = [r.summary() for r in reports]
        p = self.out / "comparisons.json"
        _dump(p, summary)
        self.files.append(p)
        lines = ["report,index,absolute,relative"]
        for i, r in enumerate(reports):
            for k, (a, b) in enumerate(zip(r.absolute, r.relative)):
                lines.append(f"{i},{k},{float(a)!r},{float(b)!r}")
        p = self.out / "comparisons.csv"
        p.write_text("\n".join(lines) + "\n")
        self.files.append(p)

    def _deviation_norm(self, lam, ext):
        ref = self.per_lambda[lam]["dressed"].C_S0
        return float(np.linalg.norm(ext.to_complex() - ref.to_complex()))

    def run(self) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        for task in self.cfg.tasks:
            logger.info("task %s", task)
            try:
                getattr(self, f"task_{task}")()
            except ReadoutError as exc:
                raise ReadoutError(f"task {task}: {type(exc).__name__}: {exc}") from exc
        prov = {
            "package": "detector_readout",
            "version": __version__,
            "config_format_version": CONFIG_VERSION,
            "config": self.cfg.raw,
            "libraries": {"numpy": np.__version__, "scipy": scipy.__version__, "mpmath": mpmath.__version__,
                          "pyyaml": yaml.__version__},
            "outputs": sorted(str(p.relative_to(self.out)) for p in self.files),
        }
        _dump(self.out / "provenance.json", prov)
        failed = [r for r in self.reports if r.passed is False]
        return 2 if failed else 0


def run_config(cfg: ScenarioConfig, output_dir) -> tuple[int, list]:
    """Execute ``cfg`` writing into ``output_dir``; returns (exit status, reports)."""
    runner = _Runner(cfg, Path(output_dir))
    status = runner.run()
    return status, runner.reports


# ---------------------------------------------------------------------------
# command line


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--tolerance expects name=value, got {item!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--tolerance {name}: {value!r} is not a number") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detector-readout",
        description="Run detector-readout scenarios: Matsubara correlators, Dyson dressing, extraction, "
                    "ED oracle, Wick test and analytic continuation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a scenario config")
    run.add_argument("config", help="YAML scenario file")
    run.add_argument("--output-dir", help=f"output directory (default: config output_dir, then ${ENV_OUTPUT_DIR}, "
                                          "then ./readout_output)")
    run.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    run.add_argument("--tolerance", action="append", metavar="NAME=VALUE",
                     help=f"override a named tolerance ({', '.join(sorted(TOLERANCES))})")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config", help="YAML scenario file")
    val.add_argument("--tolerance", action="append", metavar="NAME=VALUE")
    return parser


def _validate_command(args) -> int:
    report = {"config": args.config, "errors": [], "auto_inserted": [], "tasks": []}
    try:
        overrides = _parse_overrides(args.tolerance)
        text = Path(args.config).read_text()
        data, marks = _parse_yaml(text, args.config)
        cfg, errors = validate_config(data, marks, overrides)
    except OSError as exc:
        errors, cfg = [ConfigError(f"cannot read {args.config}: {exc}")], None
    except ConfigError as exc:
        errors, cfg = [exc], None
    report["errors"] = [{"path": e.path, "line": e.line, "column": e.column, "message": str(e)} for e in errors]
    if cfg is not None:
        report["auto_inserted"] = cfg.auto_inserted
        report["tasks"] = cfg.tasks
    print(json.dumps(report, indent=1))
    return 1 if errors else 0


def _run_command(args) -> int:
    overrides = _parse_overrides(args.tolerance)
    cfg = load_config(args.config, overrides)
    out = args.output_dir or cfg.output_dir or os.environ.get(ENV_OUTPUT_DIR) or "readout_output"
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            status, reports = run_config(cfg, out)
    else:
        status, reports = run_config(cfg, out)
    for r in reports:
        print(r.line())
    print(f"outputs written to {out}")
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            return _validate_command(args)
        return _run_command(args)
    except ConfigError as exc:
        loc = f" (line {exc.line}, column {exc.column})" if getattr(exc, "line", None) else ""
        print(f"config error: {exc}{loc}", file=sys.stderr)
        return 1
    except ReadoutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
