"""Continuation of Matsubara correlators to the real axis, ``i w_n -> w + i eta``.

Two routes:

* :func:`continue_rational` substitutes ``z = w + i eta`` into a closed
  rational form (:class:`RationalForm`).
* :func:`pade_fit` / :func:`pade_eval` build a Thiele continued fraction
  through tabulated values at positive Matsubara frequencies::

      C(z) ~ a_0 / (1 + a_1 (z - z_0) / (1 + a_2 (z - z_1) / (1 + ...)))

  The recurrences run in ``mpmath`` at :data:`PADE_DPS` digits.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import mpmath
import numpy as np

from .bare import DetectorSpec, FlatBath
from .errors import ContinuationError, ParameterError, SpecMismatchError
from .grid import CorrelatorSeries

__all__ = [
    "PADE_DPS",
    "GATE_TOL",
    "RationalForm",
    "cavity_bare_form",
    "oscillator_form",
    "flat_bath_form",
    "continue_rational",
    "PadeApproximant",
    "RetardedSeries",
    "pade_fit",
    "pade_eval",
    "pade_continue",
    "pade_poles",
    "retarded_from_form",
    "default_eta",
    "retarded_to_csv",
    "retarded_to_json",
]

PADE_DPS = 50
GATE_TOL = 1e-8
EXHAUSTION_TOL = 1e-12


def default_eta(omega_d: float) -> float:
    """Default broadening ``1e-3 w_d``."""
    return 1e-3 * omega_d


def _check_eta(eta):
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")


# ---------------------------------------------------------------------------
# closed forms


@dataclass(frozen=True)
class RationalForm:
    """``P(z) / Q(z)`` with coefficients in ascending powers of ``z = i w_n``."""

    numerator: tuple
    denominator: tuple
    label: str = ""

    def __post_init__(self):
        num = tuple(complex(c) for c in self.numerator)
        den = tuple(complex(c) for c in self.denominator)
        if not den or all(c == 0 for c in den):
            raise ParameterError("denominator must be a nonzero polynomial")
        object.__setattr__(self, "numerator", num)
        object.__setattr__(self, "denominator", den)

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        p = np.polynomial.polynomial.polyval(z, self.numerator)
        q = np.polynomial.polynomial.polyval(z, self.denominator)
        return p / q

    @property
    def degree(self) -> tuple:
        return len(self.numerator) - 1, len(self.denominator) - 1

    def poles(self) -> np.ndarray:
        return np.polynomial.polynomial.polyroots(self.denominator)

    def matsubara(self, grid) -> CorrelatorSeries:
        """The form evaluated at ``i w_n`` on ``grid``."""
        return CorrelatorSeries(grid, self(1j * grid.frequencies), self.label)


def cavity_bare_form(omega_d: float) -> RationalForm:
    """``2 w_d / (z^2 - w_d^2)``."""
    return RationalForm((2 * omega_d,), (-omega_d**2, 0, 1), "D_R0")


def oscillator_form(omega_s: float) -> RationalForm:
    """``2 w_s / (z^2 - w_s^2)``."""
    return RationalForm((2 * omega_s,), (-omega_s**2, 0, 1), "C_S0")


def flat_bath_form(detector: DetectorSpec) -> RationalForm:
    """Flat-bath detector correlator ``2 w_d / (z^2 - w~_d^2 + 2 i w_d kappa)``.

    ``w~_d^2 = w_d^2 + 2 w_d delta_omega_d``. This is the ``paper_literal``
    Matsubara expression, and also the continuation of the symmetric-mode
    series from the positive frequencies.
    """
    bath = detector.bath
    if not isinstance(bath, FlatBath):
        raise SpecMismatchError("flat_bath_form needs a detector with a flat bath")
    w = detector.omega_d
    w_tilde_sq = w**2 + 2 * w * bath.delta_omega_d
    return RationalForm((2 * w,), (-w_tilde_sq + 2j * w * bath.kappa, 0, 1), "D_RB")


def continue_rational(form: RationalForm, omega, eta: float):
    """``form`` evaluated at ``z = omega + i eta``.

    Examples
    --------
    >>> complex(continue_rational(cavity_bare_form(1.0), 0.0, 1e-12)).real
    -2.0
    """
    _check_eta(eta)
    return form(np.asarray(omega, dtype=float) + 1j * eta)


# ---------------------------------------------------------------------------
# Pade


@dataclass(frozen=True, eq=False)
class PadeApproximant:
    """Thiele continued fraction through ``(i w_n, value)`` pairs.

    ``coefficients`` has one entry per interpolation point. When the data are
    exhausted by a shorter fraction (exact rational input) the tail
    coefficients are exactly zero and ``effective_order`` counts the rest.
    """

    interpolation_points: tuple
    coefficients: tuple
    order: int
    effective_order: int
    max_deviation: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.coefficients) != len(self.interpolation_points):
            raise ParameterError("coefficient count must equal point count")

    @property
    def max_frequency(self) -> float:
        return max(abs(complex(z).imag) for z, _ in self.interpolation_points)


def _thiele(z, u):
    """Continued-fraction coefficients by the Vidberg-Serene table (in mp).

    If every remaining table entry vanishes exactly the fraction has
    terminated and the tail is padded with zeros.
    """
    n = len(z)
    g = list(u)
    coeffs = [g[0]]
    for p in range(1, n):
        rest = g[p - 1:]
        if all(x == 0 for x in rest):
            return coeffs[:p - 1] + [mpmath.mpc(0)] * (n - p + 1)
        if any(x == 0 for x in g[p:]):
            raise ContinuationError(f"continued fraction breaks down at level {p}")
        prev = coeffs[p - 1]
        g = g[:p] + [(prev - g[i]) / ((z[i] - z[p - 1]) * g[i]) for i in range(p, n)]
        coeffs.append(g[p])
    return coeffs


def _cf_eval(z, points, coeffs):
    """Bottom-up evaluation of the continued fraction at ``z`` (mp)."""
    t = mpmath.mpc(1)
    for p in range(len(coeffs) - 1, 0, -1):
        if coeffs[p] == 0:
            t = mpmath.mpc(1)
            continue
        t = 1 + coeffs[p] * (z - points[p - 1]) / t
    return coeffs[0] / t


def _positive_part(series: CorrelatorSeries):
    w = series.grid.frequencies
    vals = series.to_complex()
    if series.conj_symmetry_defect() > 1e-12 * max(1.0, float(np.max(np.abs(vals)))):
        raise ParameterError(
            "Pade continuation needs a conjugate-symmetric (symmetric-mode) series; "
            "continue paper_literal data with continue_rational"
        )
    if not np.all(np.isfinite(vals)):
        raise ParameterError("series contains non-finite values")
    pos = w > 0
    return w[pos], vals[pos]


def pade_fit(series: CorrelatorSeries, order: int, gate: float = GATE_TOL, dps: int = PADE_DPS,
             exhaustion_tol: float = EXHAUSTION_TOL) -> PadeApproximant:
    """Thiele interpolation through the lowest ``order`` positive frequencies.

    The coefficient table is built at ``dps`` digits. If a shorter prefix of
    the fraction already reproduces every chosen point within
    ``exhaustion_tol`` (relative), the remaining coefficients are set to zero;
    this removes the spurious pole/zero pairs that rounding noise otherwise
    creates once a rational input is exhausted. Values at all supplied
    positive frequencies beyond the chosen ones are compared with the
    approximant and the worst relative deviation is recorded as
    ``metadata["holdout_deviation"]``.

    Raises
    ------
    ContinuationError
        If the approximant misses an interpolation point by more than
        ``gate`` (relative).
    """
    w, vals = _positive_part(series)
    if not 1 <= order <= len(w):
        raise ParameterError(f"order must lie in 1..{len(w)} (positive frequencies), got {order}")
    with mpmath.workdps(dps):
        z = [mpmath.mpc(0, x) for x in w[:order]]
        u = [mpmath.mpc(v) for v in vals[:order]]
        if any(x == 0 for x in u):
            raise ContinuationError("input vanishes at an interpolation point")
        coeffs = _thiele(z, u)
        effective = order
        for p in range(1, order + 1):
            trial = coeffs[:p] + [mpmath.mpc(0)] * (order - p)
            dev = max(float(abs(_cf_eval(zi, z, trial) - ui) / abs(ui)) for zi, ui in zip(z, u))
            if dev <= exhaustion_tol:
                coeffs, effective = trial, p
                break
        dev = max(float(abs(_cf_eval(zi, z, coeffs) - ui) / abs(ui)) for zi, ui in zip(z, u))
        holdout = 0.0
        for x, v in zip(w[order:], vals[order:]):
            got = complex(_cf_eval(mpmath.mpc(0, x), z, coeffs))
            holdout = max(holdout, abs(got - v) / abs(v))
    if not dev <= gate:
        raise ContinuationError(
            f"Pade fit misses its interpolation points by {dev:.3e} > gate {gate:g}", max_deviation=dev
        )
    points = tuple((complex(zi), complex(ui)) for zi, ui in zip(z, u))
    meta = {"dps": dps, "source": series.label, "holdout_deviation": holdout, "n_positive": len(w)}
    return PadeApproximant(points, tuple(coeffs), order, effective, dev, meta)


def pade_eval(approx: PadeApproximant, omega: float, eta: float, dps: int | None = None) -> complex:
    """Evaluate the continued fraction at ``omega + i eta``."""
    _check_eta(eta)
    with mpmath.workdps(dps or approx.metadata.get("dps", PADE_DPS)):
        z = [mpmath.mpc(p[0]) for p in approx.interpolation_points]
        value = _cf_eval(mpmath.mpc(omega, eta), z, list(approx.coefficients))
        if not (mpmath.isfinite(value.real) and mpmath.isfinite(value.imag)):
            raise ContinuationError(f"continued fraction overflowed at omega={omega}")
        out = complex(value)
    if not np.isfinite(out):
        raise ContinuationError(f"continued fraction value {value} does not fit a double at omega={omega}")
    return out


def pade_poles(approx: PadeApproximant) -> np.ndarray:
    """Poles of the approximant, from its expansion into a ratio of polynomials.

    Uses the forward recurrences ``A_k = A_{k-1} + a_k (z - z_{k-1}) A_{k-2}``
    (and the same for ``B``) on polynomial coefficients in ``z``.
    """
    k_eff = approx.effective_order
    with mpmath.workdps(approx.metadata.get("dps", PADE_DPS)):
        z = [mpmath.mpc(p[0]) for p in approx.interpolation_points]
        a = list(approx.coefficients)[:k_eff]

        def shift_mul(poly, c, zk):
            # c (z - zk) poly, ascending coefficients
            out = [mpmath.mpc(0)] * (len(poly) + 1)
            for i, v in enumerate(poly):
                out[i + 1] += c * v
                out[i] -= c * zk * v
            return out

        def add(p, q):
            n = max(len(p), len(q))
            return [(p[i] if i < len(p) else 0) + (q[i] if i < len(q) else 0) for i in range(n)]

        A_prev, A = [mpmath.mpc(0)], [a[0]]
        B_prev, B = [mpmath.mpc(1)], [mpmath.mpc(1)]
        for k in range(1, k_eff):
            A, A_prev = add(A, shift_mul(A_prev, a[k], z[k - 1])), A
            B, B_prev = add(B, shift_mul(B_prev, a[k], z[k - 1])), B
        coeffs = [complex(c) for c in B]
    while len(coeffs) > 1 and abs(coeffs[-1]) < 1e-300:
        coeffs.pop()
    if len(coeffs) < 2:
        return np.array([], dtype=complex)
    return np.polynomial.polynomial.polyroots(coeffs)


@dataclass(frozen=True, eq=False)
class RetardedSeries:
    """Retarded correlator on real frequencies at broadening ``eta``.

    ``extrapolated[k]`` marks frequencies beyond the largest interpolation
    frequency, where a Pade approximant carries no accuracy guarantee.
    """

    omega_points: np.ndarray
    eta: float
    values: np.ndarray
    extrapolated: np.ndarray | None = None
    label: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_eta(self.eta)
        w = np.asarray(self.omega_points, dtype=float)
        v = np.asarray(self.values, dtype=complex)
        if w.shape != v.shape or w.ndim != 1:
            raise ParameterError("omega_points and values must be 1-d arrays of equal length")
        flags = np.zeros(w.shape, dtype=bool) if self.extrapolated is None else np.asarray(self.extrapolated, bool)
        object.__setattr__(self, "omega_points", w)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "extrapolated", flags)

    def causality_violation(self) -> float:
        """Largest positive ``Im value`` at ``omega > 0`` (zero for a causal response)."""
        pos = self.omega_points > 0
        if not np.any(pos):
            return 0.0
        return float(max(0.0, np.max(self.values[pos].imag)))

    def peak(self) -> float:
        """Frequency of the largest ``|value|`` on the stored points."""
        return float(self.omega_points[np.argmax(np.abs(self.values))])


def retarded_from_form(form: RationalForm, omegas, eta: float) -> RetardedSeries:
    w = np.asarray(omegas, dtype=float)
    return RetardedSeries(w, eta, continue_rational(form, w, eta), label=form.label,
                          metadata={"route": "continue_rational", "form": form.label})


def pade_continue(approx: PadeApproximant, omegas, eta: float, label: str = "") -> RetardedSeries:
    """Evaluate ``approx`` on real frequencies, flagging extrapolation."""
    w = np.asarray(omegas, dtype=float)
    vals = np.array([pade_eval(approx, x, eta) for x in w])
    flags = np.abs(w) > approx.max_frequency
    meta = {"route": "pade", "order": approx.order, "effective_order": approx.effective_order,
            "fit_deviation": approx.max_deviation, "any_extrapolated": bool(flags.any())}
    return RetardedSeries(w, eta, vals, flags, label, meta)


def retarded_to_csv(series: RetardedSeries, path=None) -> str:
    """CSV with header ``omega, eta, re, im``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["omega", "eta", "re", "im"])
    for w, v in zip(series.omega_points, series.values):
        writer.writerow([repr(float(w)), repr(float(series.eta)), repr(float(v.real)), repr(float(v.imag))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def retarded_to_json(series: RetardedSeries, path=None) -> str:
    payload = {
        "label": series.label,
        "eta": series.eta,
        "metadata": series.metadata,
        "values": [
            {"omega": float(w), "re": float(v.real), "im": float(v.imag), "extrapolated": bool(f)}
            for w, v, f in zip(series.omega_points, series.values, series.extrapolated)
        ],
    }
    text = json.dumps(payload, indent=1, default=str) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
