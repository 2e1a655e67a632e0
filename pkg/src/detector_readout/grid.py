"""Matsubara grids, correlator containers and the tau <-> i omega_n transforms.

Conventions (hbar = k_B = 1)::

    C(i w_n) = int_0^beta dtau exp(i w_n tau) C(tau)
    C(tau)   = 1/beta sum_n exp(-i w_n tau) C(i w_n)

Bosonic grids hold ``n = -N..N`` with ``w_n = 2 pi n / beta``; fermionic grids
hold ``n = -N+1..N`` with ``w_n = pi (2n - 1) / beta``.

Correlator values are normally ``complex128`` arrays. Passing ``dps`` to the
closed-form constructors produces object arrays of ``mpmath.mpc`` instead;
every pointwise operation in :mod:`detector_readout.dyson` honours that
precision. This matters for extraction at large ``n``, where
``1/D_RB - 1/D_R`` cancels to ~``lambda^2 / w_n^4`` of its terms.
"""
from __future__ import annotations

import contextlib
import csv
import enum
import functools
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import mpmath
import numpy as np

from .errors import DomainError, ParameterError, ResolutionError, StatisticsError

__all__ = [
    "Statistics",
    "MatsubaraGrid",
    "CorrelatorSeries",
    "SelfEnergy",
    "TauSeries",
    "zero_series",
    "make_grid",
    "sample_tau",
    "tau_to_freq",
    "freq_to_tau",
    "kms_extend",
    "series_to_csv",
    "series_to_json",
    "series_from_json",
    "series_from_csv",
    "precision",
    "relative_error",
]


class Statistics(str, enum.Enum):
    BOSONIC = "bosonic"
    FERMIONIC = "fermionic"

    @property
    def sign(self) -> int:
        """+1 for bosons, -1 for fermions (the KMS factor)."""
        return 1 if self is Statistics.BOSONIC else -1


def _statistics(value) -> Statistics:
    try:
        return Statistics(value)
    except ValueError:
        raise ParameterError(f"unknown statistics {value!r}") from None


@dataclass(frozen=True)
class MatsubaraGrid:
    """Symmetric, finite set of Matsubara frequencies."""

    beta: float
    statistics: Statistics
    N: int

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ParameterError(f"beta must be positive and finite, got {self.beta}")
        if int(self.N) != self.N or self.N < 1:
            raise ParameterError(f"N must be a positive integer, got {self.N}")
        object.__setattr__(self, "statistics", _statistics(self.statistics))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "N", int(self.N))

    @functools.cached_property
    def indices(self) -> np.ndarray:
        lo = -self.N if self.statistics is Statistics.BOSONIC else -self.N + 1
        idx = np.arange(lo, self.N + 1)
        idx.flags.writeable = False
        return idx

    @functools.cached_property
    def frequencies(self) -> np.ndarray:
        w = matsubara_frequency(self.indices, self.beta, self.statistics)
        w.flags.writeable = False
        return w

    def mp_frequencies(self, dps: int) -> np.ndarray:
        """Frequencies evaluated with ``dps`` decimal digits (object array)."""
        with mpmath.workdps(dps):
            beta = mpmath.mpf(self.beta)
            if self.statistics is Statistics.BOSONIC:
                return np.array([2 * mpmath.pi * int(n) / beta for n in self.indices], dtype=object)
            return np.array([mpmath.pi * (2 * int(n) - 1) / beta for n in self.indices], dtype=object)

    @property
    def size(self) -> int:
        return len(self.indices)

    def position(self, n: int) -> int:
        """Array position of Matsubara index ``n``."""
        pos = int(n) - int(self.indices[0])
        if not 0 <= pos < self.size:
            raise ParameterError(f"index n={n} not on grid {self.indices[0]}..{self.indices[-1]}")
        return pos

    def mirror_positions(self) -> np.ndarray:
        """Positions holding -w_n, aligned with the natural order."""
        return np.arange(self.size)[::-1]

    def __len__(self):
        return self.size


def matsubara_frequency(n, beta, statistics) -> np.ndarray:
    n = np.asarray(n)
    if _statistics(statistics) is Statistics.BOSONIC:
        return 2 * np.pi * n / beta
    return np.pi * (2 * n - 1) / beta


def make_grid(beta: float, statistics, N: int) -> MatsubaraGrid:
    """Build a Matsubara grid.

    Examples
    --------
    >>> make_grid(2 * np.pi, "bosonic", 2).frequencies
    array([-2., -1.,  0.,  1.,  2.])
    """
    return MatsubaraGrid(beta, statistics, N)


@contextlib.contextmanager
def precision(dps):
    """Run mpmath arithmetic at ``dps`` digits; no-op for ``dps=None``."""
    if dps is None:
        yield
    else:
        with mpmath.workdps(dps):
            yield


def _to_mp(values: np.ndarray) -> np.ndarray:
    if values.dtype == object:
        return values
    return np.array([mpmath.mpc(complex(v)) for v in values], dtype=object)


def _to_complex(values: np.ndarray) -> np.ndarray:
    if values.dtype == object:
        return np.array([complex(v) for v in values], dtype=complex)
    return np.asarray(values, dtype=complex)


@dataclass(frozen=True, eq=False)
class CorrelatorSeries:
    """Values of a two-point Matsubara correlator on a grid.

    ``dps`` is ``None`` for double precision, otherwise the number of decimal
    digits carried by the ``mpmath`` object array in ``values``.
    """

    grid: MatsubaraGrid
    values: np.ndarray
    label: str = ""
    operator_statistics: Statistics = None
    dps: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        stats = self.grid.statistics if self.operator_statistics is None else _statistics(self.operator_statistics)
        if stats is not self.grid.statistics:
            raise StatisticsError(
                f"{self.label or 'series'}: operator statistics {stats.value} on a {self.grid.statistics.value} grid"
            )
        object.__setattr__(self, "operator_statistics", stats)
        vals = np.asarray(self.values)
        if self.dps is None:
            vals = _to_complex(vals)
        else:
            with mpmath.workdps(self.dps):
                vals = _to_mp(vals)
        if vals.shape != (self.grid.size,):
            raise ParameterError(f"{self.label or 'series'}: expected {self.grid.size} values, got shape {vals.shape}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.grid.size

    def at(self, n: int):
        return self.values[self.grid.position(n)]

    def to_complex(self) -> np.ndarray:
        """Values rounded to ``complex128``."""
        return _to_complex(self.values)

    def as_double(self) -> "CorrelatorSeries":
        if self.dps is None:
            return self
        return replace(self, values=self.to_complex(), dps=None)

    def with_precision(self, dps) -> "CorrelatorSeries":
        if dps is None:
            return self.as_double()
        with mpmath.workdps(dps):
            return replace(self, values=_to_mp(self.values), dps=dps)

    def relabel(self, label: str, **metadata) -> "CorrelatorSeries":
        return replace(self, label=label, metadata={**self.metadata, **metadata})

    def _combine(self, other, op):
        if isinstance(other, CorrelatorSeries):
            if other.grid != self.grid:
                raise ParameterError("series live on different grids")
            dps = max(self.dps or 0, other.dps or 0) or None
            with precision(dps):
                a = self.with_precision(dps).values
                b = other.with_precision(dps).values
                return replace(self, values=op(a, b), dps=dps, metadata={})
        with precision(self.dps):
            return replace(self, values=op(self.values, other), metadata={})

    def __add__(self, other):
        return self._combine(other, lambda a, b: a + b)

    def __sub__(self, other):
        return self._combine(other, lambda a, b: a - b)

    def __mul__(self, other):
        return self._combine(other, lambda a, b: a * b)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return self * -1

    def conj_symmetry_defect(self) -> float:
        """max_n |C(-w_n) - conj C(w_n)|, zero for Hermitian-symmetric data."""
        vals = self.to_complex()
        return float(np.max(np.abs(vals[self.grid.mirror_positions()] - np.conj(vals))))


class SelfEnergy(CorrelatorSeries):
    """Scalar insertion Sigma(i w_n) entering a Dyson equation ``G = G0 + G0 Sigma G``."""


def zero_series(grid: MatsubaraGrid, label: str = "", cls=CorrelatorSeries):
    return cls(grid, np.zeros(grid.size, dtype=complex), label, grid.statistics)


@dataclass(frozen=True, eq=False)
class TauSeries:
    """Imaginary-time samples of a correlator on points in (-beta, beta].

    For meshes covering ``[0, beta]`` the values at 0 and beta are read as the
    one-sided limits C(0+) and C(beta-).
    """

    beta: float
    tau_points: np.ndarray
    values: np.ndarray
    operator_statistics: Statistics = Statistics.BOSONIC
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        tau = np.asarray(self.tau_points, dtype=float)
        vals = np.asarray(self.values, dtype=complex)
        if tau.shape != vals.shape or tau.ndim != 1:
            raise ParameterError("tau_points and values must be 1-d arrays of equal length")
        if self.beta <= 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if np.any(tau <= -self.beta) or np.any(tau > self.beta):
            raise DomainError("tau points must lie in (-beta, beta]")
        object.__setattr__(self, "tau_points", tau)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "operator_statistics", _statistics(self.operator_statistics))

    def __call__(self, tau: float) -> complex:
        """Value at ``tau`` (exact sample if present, else linear interpolation)."""
        hit = np.nonzero(np.abs(self.tau_points - tau) <= 1e-12 * self.beta)[0]
        if hit.size:
            return complex(self.values[hit[0]])
        if tau < self.tau_points[0] or tau > self.tau_points[-1]:
            raise DomainError(f"tau={tau} outside sampled range")
        re = np.interp(tau, self.tau_points, self.values.real)
        im = np.interp(tau, self.tau_points, self.values.imag)
        return complex(re, im)


def sample_tau(func, beta: float, statistics="bosonic", n_intervals: int = 2048) -> TauSeries:
    """Sample ``func`` on the uniform mesh ``tau_j = j beta / n_intervals``, j = 0..n_intervals.

    ``func`` is called with the endpoint taus 0 and beta and is expected to
    return the one-sided limits there.
    """
    if n_intervals < 1:
        raise ParameterError("n_intervals must be >= 1")
    tau = np.linspace(0.0, beta, n_intervals + 1)
    vals = np.array([func(t) for t in tau], dtype=complex)
    return TauSeries(beta, tau, vals, statistics, {"mesh": "uniform", "n_intervals": n_intervals})


def tau_to_freq(series: TauSeries, grid: MatsubaraGrid, label: str = "") -> CorrelatorSeries:
    """Composite trapezoid estimate of ``int_0^beta exp(i w_n tau) C(tau) dtau``.

    The series must be sampled on a uniform mesh running from 0 to beta
    inclusive. At least four mesh points per period of the highest grid
    frequency are required.
    """
    if series.operator_statistics is not grid.statistics:
        raise StatisticsError("tau series statistics do not match the grid")
    if not np.isclose(series.beta, grid.beta, rtol=1e-14, atol=0):
        raise ParameterError(f"beta mismatch: series {series.beta}, grid {grid.beta}")
    tau = series.tau_points
    M = len(tau) - 1
    if M < 1 or tau[0] != 0.0 or not np.isclose(tau[-1], grid.beta, rtol=1e-14, atol=0):
        raise ParameterError("tau_to_freq needs a uniform mesh covering [0, beta] inclusive")
    h = grid.beta / M
    if np.max(np.abs(np.diff(tau) - h)) > 1e-9 * h:
        raise ParameterError("tau mesh is not uniform")
    w_max = np.max(np.abs(grid.frequencies))
    if w_max > 0 and (2 * np.pi / w_max) / h < 4:
        raise ResolutionError(
            f"mesh of {M} intervals gives {(2 * np.pi / w_max) / h:.2f} points per period "
            f"of w_max={w_max:.4g}; at least 4 are required"
        )
    weights = np.full(M + 1, h)
    weights[0] = weights[-1] = h / 2
    phase = np.exp(1j * np.outer(grid.frequencies, tau))
    vals = phase @ (weights * series.values)
    meta = {"quadrature": "composite trapezoid", "n_intervals": M, "h": h}
    return CorrelatorSeries(grid, vals, label, grid.statistics, metadata=meta)


def _tail_moments(series: CorrelatorSeries, fraction: float = 0.1):
    """Least-squares fit of C ~ a/(i w) + b/(i w)^2 on the outermost frequencies."""
    w = series.grid.frequencies
    vals = series.to_complex()
    k = max(4, int(np.ceil(fraction * len(w))))
    order = np.argsort(-np.abs(w), kind="stable")[:k]
    iw = 1j * w[order]
    basis = np.column_stack([1 / iw, 1 / iw**2])
    (a, b), *_ = np.linalg.lstsq(basis, vals[order], rcond=None)
    return a, b


def _tail_sums(tau: np.ndarray, beta: float, statistics: Statistics):
    """Closed forms of 1/beta sum_{w_n != 0} e^{-i w_n tau} / (i w_n)^k for k = 1, 2, tau in [0, beta]."""
    if statistics is Statistics.BOSONIC:
        s1 = tau / beta - 0.5
        s2 = tau / 2 - tau**2 / (2 * beta) - beta / 12
    else:
        s1 = np.full_like(tau, -0.5)
        s2 = tau / 2 - beta / 4
    return s1, s2


def freq_to_tau(
    series: CorrelatorSeries,
    tau_points,
    tail_correction: bool = False,
    kms_extension: bool = False,
) -> TauSeries:
    """Inverse transform ``1/beta sum_n exp(-i w_n tau) C(i w_n)`` over the stored grid.

    With ``tail_correction`` the frequencies beyond the grid are added
    analytically assuming ``C ~ a/(i w_n) + b/(i w_n)^2``, with ``a, b`` fitted
    on the outermost 10% of the grid; tau = 0 and beta are then accepted and
    return the one-sided limits. With ``kms_extension`` taus in (-beta, 0) are
    mapped through (anti)periodicity.
    """
    grid = series.grid
    beta = grid.beta
    tau = np.atleast_1d(np.asarray(tau_points, dtype=float))
    sign = np.ones_like(tau)
    negative = tau < 0
    if np.any(negative):
        if not kms_extension:
            raise DomainError("tau < 0 requested without kms_extension")
        if np.any(tau <= -beta):
            raise DomainError("tau must exceed -beta")
        sign[negative] = series.operator_statistics.sign
        tau = np.where(negative, tau + beta, tau)
    lo_ok = (tau >= 0) if tail_correction else (tau > 0)
    hi_ok = (tau <= beta) if tail_correction else (tau < beta)
    if not np.all(lo_ok & hi_ok):
        bad = tau[~(lo_ok & hi_ok)][0]
        raise DomainError(
            f"tau={bad} outside {'[0, beta]' if tail_correction else '(0, beta)'}"
            + ("" if tail_correction else "; endpoints need tail_correction")
        )
    w = grid.frequencies
    vals = series.to_complex()
    phase = np.exp(-1j * np.outer(tau, w))
    out = phase @ vals / beta
    meta = {"n_terms": grid.size, "tail_correction": bool(tail_correction)}
    if tail_correction:
        a, b = _tail_moments(series)
        nz = w != 0
        iw = 1j * w[nz]
        p1 = phase[:, nz] @ (1 / iw) / beta
        p2 = phase[:, nz] @ (1 / iw**2) / beta
        s1, s2 = _tail_sums(tau, beta, series.operator_statistics)
        out = out + a * (s1 - p1) + b * (s2 - p2)
        meta.update(tail_a=complex(a), tail_b=complex(b))
    # points folded from (-beta, 0) are reported at their original tau
    tau_out = np.where(negative, tau - beta, tau)
    return TauSeries(beta, tau_out, sign * out, series.operator_statistics, meta)


def kms_extend(series: TauSeries, tau: float) -> complex:
    """Value at ``tau`` in (-beta, 0) from samples on (0, beta) via C(tau) = +-C(tau + beta)."""
    beta = series.beta
    if not -beta < tau < 0:
        raise DomainError(f"kms_extend needs tau in (-beta, 0), got {tau}")
    return series.operator_statistics.sign * series(tau + beta)


def relative_error(approx: CorrelatorSeries, exact: CorrelatorSeries) -> np.ndarray:
    """Per-frequency |approx - exact| / |exact|, evaluated at the higher of both precisions."""
    dps = max(approx.dps or 0, exact.dps or 0) or None
    with precision(dps):
        if dps is None:
            a, e = approx.to_complex(), exact.to_complex()
            return np.abs(a - e) / np.abs(e)
        a = approx.with_precision(dps).values
        e = exact.with_precision(dps).values
        return np.array([float(abs(x - y) / abs(y)) for x, y in zip(a, e)])


# ---------------------------------------------------------------------------
# serialization


def _rows(series: CorrelatorSeries):
    vals = series.to_complex()
    for n, w, v in zip(series.grid.indices, series.grid.frequencies, vals):
        yield int(n), float(w), float(v.real), float(v.imag)


def series_to_csv(series: CorrelatorSeries, path=None) -> str:
    """CSV with header ``n, omega_n, re, im``; floats written with ``repr``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "omega_n", "re", "im"])
    for n, w, re, im in _rows(series):
        writer.writerow([n, repr(w), repr(re), repr(im)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def series_to_json(series: CorrelatorSeries, path=None) -> str:
    payload = {
        "beta": series.grid.beta,
        "statistics": series.grid.statistics.value,
        "label": series.label,
        "values": [{"n": n, "omega": w, "re": re, "im": im} for n, w, re, im in _rows(series)],
    }
    text = json.dumps(payload, indent=1) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def series_from_json(text: str) -> CorrelatorSeries:
    payload = json.loads(text)
    rows = payload["values"]
    idx = np.array([r["n"] for r in rows])
    stats = _statistics(payload["statistics"])
    N = int(idx.max())
    grid = make_grid(payload["beta"], stats, N)
    if not np.array_equal(idx, grid.indices):
        raise ParameterError("serialized indices do not form a symmetric grid")
    vals = np.array([complex(r["re"], r["im"]) for r in rows])
    return CorrelatorSeries(grid, vals, payload.get("label", ""), stats)


def series_from_csv(text: str, beta: float, statistics) -> CorrelatorSeries:
    reader = csv.DictReader(io.StringIO(text))
    rows = list(reader)
    idx = np.array([int(r["n"]) for r in rows])
    grid = make_grid(beta, statistics, int(idx.max()))
    if not np.array_equal(idx, grid.indices):
        raise ParameterError("serialized indices do not form a symmetric grid")
    vals = np.array([complex(float(r["re"]), float(r["im"])) for r in rows])
    return CorrelatorSeries(grid, vals, "", grid.statistics)
