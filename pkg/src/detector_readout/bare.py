"""Closed-form unperturbed correlators and bath self-energies.

All correlators follow ``C(tau) = -<T A(tau) B(0)>``; with that sign the bare
quadrature correlator of a mode of frequency ``w0`` is ``2 w0 / ((i w_n)^2 - w0^2)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .errors import DomainError, ParameterError, SpecMismatchError, StatisticsError
from .grid import CorrelatorSeries, MatsubaraGrid, SelfEnergy, Statistics, precision

__all__ = [
    "BathMode",
    "FlatBath",
    "DiscreteBath",
    "DetectorSpec",
    "OscillatorSpec",
    "LatticeSpec",
    "CouplingSpec",
    "FlatBathMode",
    "cavity_bare",
    "cavity_bare_tau",
    "oscillator_bare",
    "flat_bath_self_energy",
    "discrete_bath_self_energy",
    "bath_self_energy",
    "dispersion",
    "fermi",
    "free_fermion_propagator",
    "density_bubble",
    "local_density_bubble",
    "bubble_decay_constant",
]


class FlatBathMode(enum.Enum):
    PAPER_LITERAL = "paper_literal"
    SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class BathMode:
    """One discrete bath oscillator coupled as ``c (b + b^dag)(a + a^dag)``."""

    c: float
    omega: float

    def __post_init__(self):
        if not self.omega > 0:
            raise ParameterError(f"bath mode frequency must be positive, got {self.omega}")


@dataclass(frozen=True)
class FlatBath:
    kappa: float
    delta_omega_d: float = 0.0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ParameterError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class DiscreteBath:
    modes: tuple = ()

    def __post_init__(self):
        modes = tuple(m if isinstance(m, BathMode) else BathMode(*m) for m in self.modes)
        object.__setattr__(self, "modes", modes)


@dataclass(frozen=True)
class DetectorSpec:
    omega_d: float
    bath: FlatBath | DiscreteBath = field(default_factory=DiscreteBath)

    def __post_init__(self):
        if not self.omega_d > 0:
            raise ParameterError(f"omega_d must be positive, got {self.omega_d}")


@dataclass(frozen=True)
class OscillatorSpec:
    omega_s: float

    def __post_init__(self):
        if not self.omega_s > 0:
            raise ParameterError(f"omega_s must be positive, got {self.omega_s}")


@dataclass(frozen=True)
class LatticeSpec:
    """1D tight-binding chain ``H = -hopping sum_j (c_j^dag c_{j+1} + h.c.) - mu N``.

    ``probe_site`` is 1-based.
    """

    L: int
    hopping: float = 1.0
    mu: float = 0.0
    spin: str = "spinless"
    probe_site: int = 1
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 2:
            raise ParameterError(f"L must be an integer >= 2, got {self.L}")
        if not 1 <= self.probe_site <= self.L:
            raise ParameterError(f"probe_site must lie in 1..{self.L}, got {self.probe_site}")
        if self.spin not in ("spinless", "spinhalf"):
            raise ParameterError(f"spin must be 'spinless' or 'spinhalf', got {self.spin!r}")
        if self.boundary not in ("periodic", "open"):
            raise ParameterError(f"boundary must be 'periodic' or 'open', got {self.boundary!r}")

    @property
    def n_spin(self) -> int:
        return 2 if self.spin == "spinhalf" else 1


@dataclass(frozen=True)
class CouplingSpec:
    lam: float

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ParameterError(f"coupling must be finite, got {self.lam}")


def _require(grid: MatsubaraGrid, statistics: Statistics, what: str):
    if grid.statistics is not statistics:
        raise StatisticsError(f"{what} needs a {statistics.value} grid, got {grid.statistics.value}")


def _pole_pair(omega0: float, grid: MatsubaraGrid, dps) -> np.ndarray:
    if dps is None:
        z = 1j * grid.frequencies
        return 2 * omega0 / (z * z - omega0**2)
    with mpmath.workdps(dps):
        w0 = mpmath.mpf(omega0)
        return np.array([2 * w0 / (mpmath.mpc(0, w) ** 2 - w0**2) for w in grid.mp_frequencies(dps)], dtype=object)


def cavity_bare(omega_d: float, grid: MatsubaraGrid, dps: int | None = None) -> CorrelatorSeries:
    """Bare cavity quadrature correlator ``D_R0 = 2 w_d / ((i w_n)^2 - w_d^2)``."""
    if not omega_d > 0:
        raise ParameterError(f"omega_d must be positive, got {omega_d}")
    _require(grid, Statistics.BOSONIC, "cavity_bare")
    return CorrelatorSeries(grid, _pole_pair(omega_d, grid, dps), "D_R0", dps=dps, metadata={"omega_d": omega_d})


def oscillator_bare(omega_s: float, grid: MatsubaraGrid, dps: int | None = None) -> CorrelatorSeries:
    """Bare simulator oscillator correlator ``C_S0``; same form as :func:`cavity_bare`."""
    if not omega_s > 0:
        raise ParameterError(f"omega_s must be positive, got {omega_s}")
    _require(grid, Statistics.BOSONIC, "oscillator_bare")
    return CorrelatorSeries(grid, _pole_pair(omega_s, grid, dps), "C_S0", dps=dps, metadata={"omega_s": omega_s})


def _bose_plus_one(omega: float, beta: float) -> float:
    # n_th + 1 = 1 / (1 - exp(-beta w)); equals 1 at beta = inf
    return -1.0 / np.expm1(-beta * omega)


def cavity_bare_tau(omega_d: float, beta: float, tau: float) -> float:
    """Imaginary-time bare cavity correlator ``D_R0(tau)`` for tau in (-beta, beta].

    ``beta = np.inf`` gives the zero-temperature limit. At tau = 0 the
    ``tau > 0`` branch (the 0+ limit) is used.
    """
    if not omega_d > 0 or not beta > 0:
        raise ParameterError("omega_d and beta must be positive")
    if not -beta < tau <= beta:
        raise DomainError(f"tau={tau} outside (-beta, beta]")
    np1 = _bose_plus_one(omega_d, beta)
    t = abs(tau)
    # e^{w t} n_th written as e^{-w (beta - t)} (n_th + 1) to avoid overflow
    far = 0.0 if np.isinf(beta) else np.exp(-omega_d * (beta - t)) * np1
    return -(np.exp(-omega_d * t) * np1 + far)


def thermal_occupation(omega: float, beta: float) -> float:
    return 1.0 / np.expm1(beta * omega)


def flat_bath_self_energy(detector: DetectorSpec, grid: MatsubaraGrid, mode="paper_literal", dps=None) -> SelfEnergy:
    """Bath insertion for a flat spectrum J(w) = kappa.

    ``paper_literal`` returns the constant ``delta_omega_d - i kappa`` at every
    frequency, which reproduces the damped detector denominator
    ``(i w_n)^2 - w~_d^2 + 2 i w_d kappa`` but breaks ``S(-w_n) = conj S(w_n)``.
    ``symmetric`` uses ``delta_omega_d - i kappa sign(w_n)`` (real at n = 0).
    """
    bath = detector.bath
    if not isinstance(bath, FlatBath):
        raise SpecMismatchError("flat_bath_self_energy needs a detector with a flat bath")
    _require(grid, Statistics.BOSONIC, "flat_bath_self_energy")
    mode = FlatBathMode(mode)
    if mode is FlatBathMode.PAPER_LITERAL:
        sign = np.ones(grid.size)
    else:
        sign = np.sign(grid.indices).astype(float)
    if dps is None:
        vals = bath.delta_omega_d - 1j * bath.kappa * sign
    else:
        with mpmath.workdps(dps):
            vals = np.array([mpmath.mpc(bath.delta_omega_d, -bath.kappa * s) for s in sign], dtype=object)
    meta = {"kappa": bath.kappa, "delta_omega_d": bath.delta_omega_d, "mode": mode.value}
    return SelfEnergy(grid, vals, f"Sigma_bath[{mode.value}]", dps=dps, metadata=meta)


def discrete_bath_self_energy(modes, grid: MatsubaraGrid, dps=None) -> SelfEnergy:
    """``sum_i |c_i|^2 2 w_i / ((i w_n)^2 - w_i^2)`` for a list of bath modes."""
    _require(grid, Statistics.BOSONIC, "discrete_bath_self_energy")
    modes = DiscreteBath(tuple(modes)).modes if not isinstance(modes, DiscreteBath) else modes.modes
    if dps is None:
        vals = np.zeros(grid.size, dtype=complex)
    else:
        with mpmath.workdps(dps):
            vals = np.array([mpmath.mpc(0)] * grid.size, dtype=object)
    with precision(dps):
        for m in modes:
            vals = vals + abs(m.c) ** 2 * _pole_pair(m.omega, grid, dps)
    return SelfEnergy(grid, vals, "Sigma_bath[discrete]", dps=dps, metadata={"n_modes": len(modes)})


def bath_self_energy(detector: DetectorSpec, grid: MatsubaraGrid, mode="paper_literal", dps=None) -> SelfEnergy:
    if isinstance(detector.bath, FlatBath):
        return flat_bath_self_energy(detector, grid, mode, dps)
    return discrete_bath_self_energy(detector.bath, grid, dps)


def dispersion(lattice: LatticeSpec, k_index) -> np.ndarray:
    """``eps_k = -2 hopping cos(2 pi k / L) - mu`` on a periodic chain."""
    if lattice.boundary != "periodic":
        raise SpecMismatchError("momentum-space dispersion needs a periodic chain; open chains are ED-only")
    k = np.asarray(k_index)
    if np.any(k < 0) or np.any(k >= lattice.L):
        raise ParameterError(f"k_index must lie in 0..{lattice.L - 1}")
    return -2 * lattice.hopping * np.cos(2 * np.pi * k / lattice.L) - lattice.mu


def fermi(eps, beta: float):
    # 0.5 (1 - tanh(beta eps / 2)) does not overflow
    return 0.5 * (1 - np.tanh(0.5 * beta * np.asarray(eps)))


def free_fermion_propagator(epsilon_k: float, grid: MatsubaraGrid) -> CorrelatorSeries:
    _require(grid, Statistics.FERMIONIC, "free_fermion_propagator")
    vals = 1 / (1j * grid.frequencies - epsilon_k)
    return CorrelatorSeries(grid, vals, "G0", metadata={"epsilon_k": float(epsilon_k)})


def _bubble_terms(lattice: LatticeSpec, q_index: int, beta: float):
    """Weights ``A = f(e_k) - f(e_k+q)``, offsets ``d = e_k - e_k+q`` and the e_k pairs."""
    k = np.arange(lattice.L)
    ek = dispersion(lattice, k)
    ekq = dispersion(lattice, (k + q_index) % lattice.L)
    return fermi(ek, beta) - fermi(ekq, beta), ek - ekq, ek, ekq


def density_bubble(lattice: LatticeSpec, q_index: int, grid: MatsubaraGrid, beta: float | None = None) -> CorrelatorSeries:
    """Particle-hole bubble ``sum_{k,s} [f(e_k) - f(e_k+q)] / (i w_n + e_k - e_k+q)``.

    Terms with ``e_k = e_k+q`` at ``w_n = 0`` take the limit ``-beta f (1 - f)``.
    """
    _require(grid, Statistics.BOSONIC, "density_bubble")
    beta = grid.beta if beta is None else float(beta)
    if not np.isclose(beta, grid.beta, rtol=1e-14, atol=0):
        raise ParameterError(f"beta {beta} differs from the grid's {grid.beta}")
    A, d, ek, ekq = _bubble_terms(lattice, q_index, beta)
    w = grid.frequencies
    vals = np.zeros(grid.size, dtype=complex)
    nz = w != 0
    vals[nz] = (A[None, :] / (1j * w[nz, None] + d[None, :])).sum(axis=1)
    if np.any(~nz):
        near = np.abs(beta * d) < 1e-8
        f_mid = fermi(0.5 * (ek + ekq), beta)
        static = np.where(near, -beta * f_mid * (1 - f_mid), A / np.where(near, 1.0, d))
        vals[~nz] = static.sum()
    vals *= lattice.n_spin
    return CorrelatorSeries(grid, vals, f"bubble[q={q_index}]", metadata={"q_index": int(q_index)})


def local_density_bubble(lattice: LatticeSpec, grid: MatsubaraGrid) -> CorrelatorSeries:
    """Connected density correlator of one site, ``1/L^2 sum_q bubble(q)``.

    This is the lowest-order (Wick) value of ``-<T dn_R(tau) dn_R>`` for the
    site density ``n_R = 1/L sum_{k,q} e^{iqR} c_k^dag c_{k+q}``; translation
    invariance makes it independent of the probe site.
    """
    total = sum((density_bubble(lattice, q, grid) for q in range(lattice.L)), start=0)
    vals = total.to_complex() / lattice.L**2
    return CorrelatorSeries(grid, vals, "C_S0[bubble]", metadata={"L": lattice.L})


def bubble_decay_constant(lattice: LatticeSpec, q_index: int, beta: float) -> float:
    """K with ``|bubble(i w_n)| <= K / w_n^2`` for every ``w_n != 0``.

    Because ``sum_k A_k = 0`` the bubble equals ``-sum A d / (i w (i w + d))``,
    so ``K = n_spin * sum |A d|`` bounds it.
    """
    A, d, *_ = _bubble_terms(lattice, q_index, beta)
    return float(lattice.n_spin * np.sum(np.abs(A * d)))
