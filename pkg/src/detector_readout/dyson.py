"""Dyson composition of detector/simulator correlators and the readout extraction.

Every operation is pointwise in ``n``. Inputs may be double precision or
``mpmath`` series (see :mod:`detector_readout.grid`); the result carries the
higher of the input precisions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bare import (
    DetectorSpec,
    FlatBath,
    LatticeSpec,
    OscillatorSpec,
    bath_self_energy,
    cavity_bare,
    local_density_bubble,
    oscillator_bare,
)
from .errors import ExtractionError, ParameterError, SingularResummationError
from .grid import CorrelatorSeries, MatsubaraGrid, SelfEnergy, precision, series_to_csv, series_to_json

__all__ = [
    "SelfEnergy",
    "DressedSet",
    "POLE_GUARD",
    "dyson_solve",
    "detector_with_bath",
    "detector_full_oscillator",
    "simulator_full",
    "detector_full_fermion",
    "extract",
    "oscillator_readout",
    "fermion_readout",
    "save_dressed",
]

POLE_GUARD = 1e-12
MAGNITUDE_FLOOR = 1e-300


def _aligned(*series: CorrelatorSeries):
    grid = series[0].grid
    for s in series[1:]:
        if s.grid != grid:
            raise ParameterError(f"{s.label or 'series'} lives on a different grid than {series[0].label or 'series'}")
    dps = max((s.dps or 0) for s in series) or None
    return grid, dps, [s.with_precision(dps).values for s in series]


def _resum(numerator, insertion, grid: MatsubaraGrid, pole_guard: float, what: str):
    denom = 1 - numerator * insertion
    mags = np.array([float(abs(x)) for x in denom]) if denom.dtype == object else np.abs(denom)
    bad = np.nonzero(mags < pole_guard)[0]
    if bad.size:
        n = int(grid.indices[bad[0]])
        raise SingularResummationError(
            f"{what}: |1 - G0 Sigma| = {mags[bad[0]]:.3e} below pole guard {pole_guard:g} at n={n}", n=n
        )
    return numerator / denom


def dyson_solve(bare: CorrelatorSeries, sigma: CorrelatorSeries, pole_guard: float = POLE_GUARD, label: str = "") -> CorrelatorSeries:
    """Resum ``G = G0 + G0 Sigma G`` into ``G0 / (1 - G0 Sigma)``."""
    grid, dps, (g0, s) = _aligned(bare, sigma)
    with precision(dps):
        vals = _resum(g0, s, grid, pole_guard, "dyson_solve")
    return CorrelatorSeries(grid, vals, label or f"dyson[{bare.label}]", dps=dps)


def detector_with_bath(detector: DetectorSpec, grid: MatsubaraGrid, mode="paper_literal", dps=None, pole_guard=POLE_GUARD):
    """Detector correlator dressed by its bath, ``D_RB = D_R0 / (1 - D_R0 Sigma_bath)``.

    For a flat bath in ``paper_literal`` mode this is exactly
    ``2 w_d / ((i w_n)^2 - w~_d^2 + 2 i w_d kappa)``.
    """
    d0 = cavity_bare(detector.omega_d, grid, dps)
    sigma = bath_self_energy(detector, grid, mode, dps)
    out = dyson_solve(d0, sigma, pole_guard, "D_RB")
    meta = {"omega_d": detector.omega_d, "bath": type(detector.bath).__name__}
    if isinstance(detector.bath, FlatBath):
        meta["mode"] = str(getattr(mode, "value", mode))
    return replace(out, metadata=meta)


def _coupled(first, second, lam, pole_guard, label, what):
    grid, dps, (a, b) = _aligned(first, second)
    with precision(dps):
        vals = _resum(a, abs(lam) ** 2 * b, grid, pole_guard, what)
    return CorrelatorSeries(grid, vals, label, dps=dps, metadata={"lambda": lam})


def detector_full_oscillator(D_RB, C_S0, lam: float, pole_guard=POLE_GUARD) -> CorrelatorSeries:
    """``D_R = D_RB / (1 - |lam|^2 D_RB C_S0)``."""
    return _coupled(D_RB, C_S0, lam, pole_guard, "D_R", "detector_full_oscillator")


def simulator_full(C_S0, D_RB, lam: float, pole_guard=POLE_GUARD) -> CorrelatorSeries:
    """Backaction-dressed simulator correlator ``C_S = C_S0 / (1 - |lam|^2 C_S0 D_RB)``."""
    return _coupled(C_S0, D_RB, lam, pole_guard, "C_S", "simulator_full")


def detector_full_fermion(D_RB, C_SL_approx, lam: float, pole_guard=POLE_GUARD) -> CorrelatorSeries:
    """``D_R = D_RB / (1 - |lam|^2 D_RB C_SL)`` with an approximate irreducible insertion."""
    return _coupled(D_RB, C_SL_approx, lam, pole_guard, "D_R", "detector_full_fermion")


def extract(D_RB: CorrelatorSeries, D_R: CorrelatorSeries, lam: float, floor: float = MAGNITUDE_FLOOR, label: str = "extracted"):
    """Simulator correlator seen by the detector, ``(1/D_RB - 1/D_R) / |lam|^2``.

    Returns ``C_S0`` when the coupling operators obey Wick's theorem and the
    backaction-modified irreducible correlator ``C_SL`` otherwise.
    """
    if lam == 0:
        raise ExtractionError("extraction is undefined at lambda = 0")
    grid, dps, (drb, dr) = _aligned(D_RB, D_R)
    for name, vals in (("D_RB", drb), ("D_R", dr)):
        mags = np.array([float(abs(x)) for x in vals]) if vals.dtype == object else np.abs(vals)
        bad = np.nonzero(~(mags > floor))[0]
        if bad.size:
            n = int(grid.indices[bad[0]])
            raise ExtractionError(f"{name} vanishes at n={n}; cannot invert", n=n)
    with precision(dps):
        vals = (1 / drb - 1 / dr) / abs(lam) ** 2
    return CorrelatorSeries(grid, vals, label, dps=dps, metadata={"lambda": lam})


@dataclass(frozen=True, eq=False)
class DressedSet:
    """Detector and simulator correlators of one readout scenario on a shared grid."""

    D_R0: CorrelatorSeries
    D_RB: CorrelatorSeries
    D_R: CorrelatorSeries
    C_S0: CorrelatorSeries
    C_S: CorrelatorSeries | None = None
    extracted: CorrelatorSeries | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = self.D_R0.grid
        for name, s in self.items():
            if s.grid != grid:
                raise ParameterError(f"{name} is not on the shared grid")

    def items(self):
        for name in ("D_R0", "D_RB", "D_R", "C_S0", "C_S", "extracted"):
            s = getattr(self, name)
            if s is not None:
                yield name, s


def oscillator_readout(detector: DetectorSpec, oscillator: OscillatorSpec, lam: float, grid: MatsubaraGrid,
                       mode="paper_literal", dps=None) -> DressedSet:
    """Closed-form oscillator readout: compose, dress, and extract."""
    d0 = cavity_bare(detector.omega_d, grid, dps)
    drb = detector_with_bath(detector, grid, mode, dps)
    cs0 = oscillator_bare(oscillator.omega_s, grid, dps)
    dr = detector_full_oscillator(drb, cs0, lam)
    cs = simulator_full(cs0, drb, lam)
    ext = extract(drb, dr, lam) if lam != 0 else None
    prov = {
        "scenario": "oscillator",
        "omega_d": detector.omega_d,
        "bath": _bath_record(detector),
        "omega_s": oscillator.omega_s,
        "lambda": lam,
        "mode": str(getattr(mode, "value", mode)),
        "dps": dps,
        "grid": _grid_record(grid),
    }
    return DressedSet(d0, drb, dr, cs0, cs, ext, prov)


def fermion_readout(detector: DetectorSpec, lattice: LatticeSpec, lam: float, grid: MatsubaraGrid,
                    mode="symmetric") -> DressedSet:
    """Closed-form fermion readout with the lowest-order (bubble) irreducible insertion."""
    d0 = cavity_bare(detector.omega_d, grid)
    drb = detector_with_bath(detector, grid, mode)
    csl = local_density_bubble(lattice, grid)
    dr = detector_full_fermion(drb, csl, lam)
    ext = extract(drb, dr, lam, label="C_SL") if lam != 0 else None
    prov = {
        "scenario": "fermion",
        "omega_d": detector.omega_d,
        "bath": _bath_record(detector),
        "lattice": vars(lattice).copy(),
        "lambda": lam,
        "mode": str(getattr(mode, "value", mode)),
        "grid": _grid_record(grid),
    }
    return DressedSet(d0, drb, dr, csl, None, ext, prov)


def _grid_record(grid: MatsubaraGrid) -> dict:
    return {"beta": grid.beta, "statistics": grid.statistics.value, "N": grid.N}


def _bath_record(detector: DetectorSpec) -> dict:
    bath = detector.bath
    if isinstance(bath, FlatBath):
        return {"type": "flat", "kappa": bath.kappa, "delta_omega_d": bath.delta_omega_d}
    return {"type": "discrete", "modes": [{"c": m.c, "omega": m.omega} for m in bath.modes]}


def save_dressed(dressed: DressedSet, directory, tolerances: dict | None = None) -> list[Path]:
    """Write each series as CSV and JSON plus ``provenance.json``; returns the written paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, s in dressed.items():
        for suffix, writer in ((".csv", series_to_csv), (".json", series_to_json)):
            path = out / f"{name}{suffix}"
            writer(s, path)
            written.append(path)
    prov = dict(dressed.provenance)
    if tolerances:
        prov["tolerances"] = dict(tolerances)
    path = out / "provenance.json"
    path.write_text(json.dumps(prov, indent=1, sort_keys=True, default=str) + "\n")
    written.append(path)
    return written
