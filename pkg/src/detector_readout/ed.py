"""Exact-diagonalization oracle for the coupled detector/simulator system.

The total Hamiltonian is built in a truncated tensor-product occupation basis::

    H_T = H_S + w_d a^dag a + sum_i [w_i b_i^dag b_i + c_i (b_i + b_i^dag)(a + a^dag)]
          + lam O_S (a + a^dag)

with ``O_S = a_s + a_s^dag`` (oscillator simulator) or the probe-site density,
optionally minus its decoupled thermal mean (lattice simulator). No rotating
wave approximation is made.

Factor ordering of the tensor product: lattice modes first, then the cavity,
then the simulator oscillator, then bath modes in the order given. Lattice
fermions use a Jordan-Wigner string over modes ordered site 1 (spin up,
spin down), site 2, ...; ``c_j = Z_1 ... Z_{j-1} sigma^-_j``.

Matsubara correlators come from the Lehmann representation::

    C_AB(i w_n) = 1/Z sum_{m,m'} A_mm' B_m'm (e^{-beta E_m} - xi e^{-beta E_m'}) / (i w_n - (E_m' - E_m))

with ``xi = +1`` for bosons and ``-1`` for fermions; bosonic terms with
``w_n = 0`` and ``E_m = E_m'`` contribute ``-beta e^{-beta E_m} A_mm' B_m'm / Z``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .bare import (
    CouplingSpec,
    DetectorSpec,
    DiscreteBath,
    LatticeSpec,
    OscillatorSpec,
)
from .dyson import DressedSet, extract
from .errors import (
    ConvergenceError,
    DegenerateTimeError,
    DimensionError,
    ExtractionError,
    ParameterError,
    SpecMismatchError,
    StatisticsError,
)
from .grid import CorrelatorSeries, MatsubaraGrid, Statistics

__all__ = [
    "Truncation",
    "SystemSpec",
    "ModelHamiltonian",
    "SpectralData",
    "thermal_cutoff",
    "resolve_truncation",
    "build_hamiltonian",
    "diagonalize",
    "lehmann_correlator",
    "imaginary_time_product",
    "wick_residual",
    "ReadoutReport",
    "solve_spectrum",
    "top_level_weights",
    "readout_experiment",
    "DEFAULT_BUDGET",
    "ORDERING_CONVENTION",
]

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 20_000
BOX_FACTOR = 50  # an energy cap may prune a box up to this many times the budget
ORDERING_CONVENTION = (
    "tensor order: lattice modes, cavity, oscillator, bath modes; "
    "Jordan-Wigner over (site 1 up, site 1 down, site 2 up, ...), site 1 leftmost"
)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Truncation:
    """Boson-number cutoffs.

    ``None`` entries start from the free-mode rule of :func:`thermal_cutoff`.
    With ``dressed=True`` they are then raised until the top retained level of
    each such mode carries less than ``thermal_tol`` thermal weight in the
    *coupled* state (see :func:`solve_spectrum`); couplings populate levels
    far above the free thermal occupation. ``n_max_bath_mode`` may be one
    integer for all bath modes or a tuple with one entry per mode.

    ``energy_cap`` additionally drops every product state whose free boson
    energy ``sum_i w_i n_i`` exceeds the cap. Such states carry negligible
    weight long before the per-mode cutoffs bind, so the cap shrinks the
    basis by an order of magnitude at no cost in accuracy (check it with
    :func:`readout_experiment`'s convergence test). ``"auto"`` starts from
    the cap above which free thermal weight falls below ``thermal_tol`` and,
    with ``dressed``, raises it until the outermost shell of width
    ``min_i w_i`` carries less than ``thermal_tol`` in the coupled state.
    """

    n_max_cavity: int | None = None
    n_max_oscillator: int | None = None
    n_max_bath_mode: int | tuple | None = None
    thermal_tol: float = 1e-12
    dressed: bool = True
    energy_cap: float | str | None = None

    def __post_init__(self):
        if isinstance(self.energy_cap, str):
            if self.energy_cap != "auto":
                raise ParameterError(f"energy_cap must be a number, 'auto' or None, got {self.energy_cap!r}")
        elif self.energy_cap is not None and not self.energy_cap > 0:
            raise ParameterError(f"energy_cap must be positive, got {self.energy_cap}")
        if not 0 < self.thermal_tol < 1:
            raise ParameterError(f"thermal_tol must lie in (0, 1), got {self.thermal_tol}")
        for name in ("n_max_cavity", "n_max_oscillator"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ParameterError(f"{name} must be >= 1, got {v}")
        b = self.n_max_bath_mode
        if b is not None:
            bs = b if isinstance(b, tuple) else (b,)
            if any(x < 1 for x in bs):
                raise ParameterError(f"n_max_bath_mode must be >= 1, got {b}")


@dataclass(frozen=True)
class SystemSpec:
    detector: DetectorSpec
    simulator: OscillatorSpec | LatticeSpec | None
    coupling: CouplingSpec
    beta: float
    truncation: Truncation = field(default_factory=Truncation)
    dimension_budget: int = DEFAULT_BUDGET
    mean_subtract: bool = True

    def __post_init__(self):
        if not isinstance(self.detector.bath, DiscreteBath):
            raise SpecMismatchError("exact diagonalization needs a discrete bath")
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if isinstance(self.coupling, (int, float)):
            object.__setattr__(self, "coupling", CouplingSpec(float(self.coupling)))

    @property
    def lam(self) -> float:
        return self.coupling.lam

    def with_lambda(self, lam: float) -> "SystemSpec":
        return replace(self, coupling=CouplingSpec(lam))


def thermal_cutoff(omega: float, beta: float, tol: float = 1e-12) -> int:
    """Smallest ``n_max >= 1`` whose thermal occupation ``e^{-beta w n}/Z`` is below ``tol``."""
    if not omega > 0 or not beta > 0:
        raise ParameterError("omega and beta must be positive")
    log_z = -np.log1p(-np.exp(-beta * omega))
    n = int(np.floor((-np.log(tol) - log_z) / (beta * omega))) + 1
    return max(1, n)


def resolve_truncation(spec: SystemSpec) -> Truncation:
    """Fill unset cutoffs with the thermal-weight rule."""
    t = spec.truncation
    cav = t.n_max_cavity or thermal_cutoff(spec.detector.omega_d, spec.beta, t.thermal_tol)
    osc = t.n_max_oscillator
    if isinstance(spec.simulator, OscillatorSpec) and osc is None:
        osc = thermal_cutoff(spec.simulator.omega_s, spec.beta, t.thermal_tol)
    modes = spec.detector.bath.modes
    b = t.n_max_bath_mode
    if b is None:
        baths = tuple(thermal_cutoff(m.omega, spec.beta, t.thermal_tol) for m in modes)
    elif isinstance(b, tuple):
        if len(b) != len(modes):
            raise ParameterError(f"{len(b)} bath cutoffs for {len(modes)} bath modes")
        baths = b
    else:
        baths = (b,) * len(modes)
    cap = t.energy_cap
    if cap == "auto":
        cap = -np.log(t.thermal_tol) / spec.beta + max(_boson_frequencies(spec, osc is not None))
    return replace(t, n_max_cavity=cav, n_max_oscillator=osc, n_max_bath_mode=baths, energy_cap=cap)


def _boson_frequencies(spec: SystemSpec, with_oscillator: bool) -> list:
    w = [spec.detector.omega_d] + [m.omega for m in spec.detector.bath.modes]
    if with_oscillator and isinstance(spec.simulator, OscillatorSpec):
        w.append(spec.simulator.omega_s)
    return w


def hilbert_dimension(spec: SystemSpec) -> int:
    t = resolve_truncation(spec)
    dim = t.n_max_cavity + 1
    if isinstance(spec.simulator, OscillatorSpec):
        dim *= t.n_max_oscillator + 1
    elif isinstance(spec.simulator, LatticeSpec):
        dim *= 2 ** (spec.simulator.L * spec.simulator.n_spin)
    for b in t.n_max_bath_mode:
        dim *= b + 1
    return dim


# ---------------------------------------------------------------------------
# operators


def _annihilator(n_max: int) -> sp.csr_matrix:
    return sp.diags(np.sqrt(np.arange(1, n_max + 1, dtype=float)), 1, format="csr")


def _embed(op, pos: int, dims) -> sp.csr_matrix:
    left = int(np.prod(dims[:pos], dtype=np.int64))
    right = int(np.prod(dims[pos + 1:], dtype=np.int64))
    out = op
    if left > 1:
        out = sp.kron(sp.identity(left, format="csr"), out, format="csr")
    if right > 1:
        out = sp.kron(out, sp.identity(right, format="csr"), format="csr")
    return out.tocsr()


def _jordan_wigner(n_modes: int):
    """Annihilation operators of ``n_modes`` fermionic modes on 2^n_modes states."""
    lower = sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
    z = sp.diags([1.0, -1.0], format="csr")
    eye = sp.identity(2, format="csr")
    ops = []
    for j in range(n_modes):
        factors = [z] * j + [lower] + [eye] * (n_modes - j - 1)
        out = factors[0]
        for f in factors[1:]:
            out = sp.kron(out, f, format="csr")
        ops.append(out.tocsr())
    return ops


def lattice_hamiltonian(lattice: LatticeSpec):
    """Fock-space chain Hamiltonian, site densities and total number.

    Periodic chains include the bond L -> 1 (for L = 2 both bonds join the
    same pair, matching the cosine band).
    """
    ns = lattice.n_spin
    n_modes = lattice.L * ns
    c = _jordan_wigner(n_modes)
    dim = 2**n_modes
    H = sp.csr_matrix((dim, dim))
    bonds = [(j, j + 1) for j in range(lattice.L - 1)]
    if lattice.boundary == "periodic":
        bonds.append((lattice.L - 1, 0))
    for i, j in bonds:
        for s in range(ns):
            a, b = c[i * ns + s], c[j * ns + s]
            hop = a.T @ b
            H = H - lattice.hopping * (hop + hop.T)
    number = [m.T @ m for m in c]
    N = sum(number[1:], start=number[0])
    H = H - lattice.mu * N
    density = [sum(number[j * ns + 1:(j + 1) * ns], start=number[j * ns]) for j in range(lattice.L)]
    return H.tocsr(), density, N.tocsr()


@dataclass(eq=False)
class ModelHamiltonian:
    """Sparse H_T together with the operators the correlators need.

    ``basis`` lists the retained product states (indices into the full
    tensor-product box) when an energy cap is active, else ``None``;
    ``occupations`` maps each boson factor to its occupation per retained
    state. ``operators`` holds ``"Gamma_R"`` (cavity quadrature) and, when a
    simulator is present, ``"O_S"`` (its coupling operator). ``sectors`` labels
    every basis state with the conserved quantum numbers H_T respects.
    """

    matrix: sp.csr_matrix
    operators: dict
    dims: tuple
    factors: tuple
    sectors: np.ndarray | None = None
    info: dict = field(default_factory=dict)
    occupations: dict = field(default_factory=dict)
    basis: np.ndarray | None = None
    free_energy: np.ndarray | None = None

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


def _simulator_mean(lattice: LatticeSpec, beta: float) -> float:
    """Thermal mean of the probe-site density of the decoupled chain."""
    H, density, _ = lattice_hamiltonian(lattice)
    e, v = np.linalg.eigh(H.toarray())
    p = np.exp(-beta * (e - e[0]))
    p /= p.sum()
    n = density[lattice.probe_site - 1]
    return float(np.einsum("m,im,ij,jm->", p, v, n.toarray(), v))


def build_hamiltonian(spec: SystemSpec, include_simulator: bool = True, include_detector: bool = True) -> ModelHamiltonian:
    """Sparse matrix of H_T for ``spec``.

    ``include_simulator=False`` drops the simulator factor (detector and bath
    only, for ``D_RB``); ``include_detector=False`` keeps the simulator alone
    (for ``C_S0``).
    """
    trunc = resolve_truncation(spec)
    sim = spec.simulator if include_simulator else None
    if not include_detector and sim is None:
        raise ParameterError("nothing to build: neither detector nor simulator")

    factors, dims = [], []
    if isinstance(sim, LatticeSpec):
        factors.append("lattice")
        dims.append(2 ** (sim.L * sim.n_spin))
    if include_detector:
        factors.append("cavity")
        dims.append(trunc.n_max_cavity + 1)
    if isinstance(sim, OscillatorSpec):
        factors.append("oscillator")
        dims.append(trunc.n_max_oscillator + 1)
    if include_detector:
        for i, nb in enumerate(trunc.n_max_bath_mode):
            factors.append(f"bath{i}")
            dims.append(nb + 1)
    dim = int(np.prod(dims, dtype=np.int64))
    limit = spec.dimension_budget if trunc.energy_cap is None else BOX_FACTOR * spec.dimension_budget
    if dim > limit:
        raise DimensionError(
            f"Hilbert dimension {dim} ({' x '.join(map(str, dims))}) exceeds budget {limit}",
            dimension=dim,
        )

    H = sp.csr_matrix((dim, dim))
    ops = {}
    info = {"dims": list(dims), "factors": list(factors), "convention": ORDERING_CONVENTION,
            "truncation": {"n_max_cavity": trunc.n_max_cavity, "n_max_oscillator": trunc.n_max_oscillator,
                           "n_max_bath_mode": list(trunc.n_max_bath_mode)}}
    labels = {}
    free_energy = np.zeros(dim)
    occupations = {}

    if include_detector:
        pos = factors.index("cavity")
        a = _annihilator(trunc.n_max_cavity)
        x_d = _embed(a + a.T, pos, dims)
        H = H + spec.detector.omega_d * _embed(a.T @ a, pos, dims)
        ops["Gamma_R"] = x_d
        occupations["cavity"] = _occupations(dims, pos)
        free_energy += spec.detector.omega_d * occupations["cavity"]
        for i, mode in enumerate(spec.detector.bath.modes):
            pos_b = factors.index(f"bath{i}")
            b = _annihilator(trunc.n_max_bath_mode[i])
            x_b = _embed(b + b.T, pos_b, dims)
            H = H + mode.omega * _embed(b.T @ b, pos_b, dims) + mode.c * (x_b @ x_d)
            occupations[f"bath{i}"] = _occupations(dims, pos_b)
            free_energy += mode.omega * occupations[f"bath{i}"]

    if isinstance(sim, OscillatorSpec):
        pos = factors.index("oscillator")
        a_s = _annihilator(trunc.n_max_oscillator)
        x_s = _embed(a_s + a_s.T, pos, dims)
        H = H + sim.omega_s * _embed(a_s.T @ a_s, pos, dims)
        ops["O_S"] = x_s
        occupations["oscillator"] = _occupations(dims, pos)
        free_energy += sim.omega_s * occupations["oscillator"]
    elif isinstance(sim, LatticeSpec):
        pos = factors.index("lattice")
        h_lat, density, number = lattice_hamiltonian(sim)
        H = H + _embed(h_lat, pos, dims)
        n_probe = _embed(density[sim.probe_site - 1], pos, dims)
        mean = _simulator_mean(sim, spec.beta) if spec.mean_subtract else 0.0
        ops["O_S"] = (n_probe - mean * sp.identity(dim, format="csr")).tocsr()
        info["O_S_mean_subtracted"] = mean
        # the lattice is the leftmost factor
        labels["fermion_number"] = np.repeat(np.rint(number.diagonal()).astype(np.int64), dim // dims[pos])

    if sim is not None and include_detector and spec.lam != 0:
        H = H + spec.lam * (ops["O_S"] @ ops["Gamma_R"])

    labels["boson_parity"] = sum(occupations.values(), start=np.zeros(dim, dtype=np.int64)) % 2
    H = H.tocsr()
    basis = None
    if trunc.energy_cap is not None:
        basis = np.nonzero(free_energy <= trunc.energy_cap * (1 + 1e-12))[0]
        H = H[basis][:, basis]
        ops = {k: v[basis][:, basis].tocsr() for k, v in ops.items()}
        occupations = {k: v[basis] for k, v in occupations.items()}
        labels = {k: (v[basis] if v is not None else None) for k, v in labels.items()}
        info["energy_cap"] = float(trunc.energy_cap)
        if len(basis) > spec.dimension_budget:
            raise DimensionError(
                f"capped Hilbert dimension {len(basis)} exceeds budget {spec.dimension_budget}",
                dimension=len(basis),
            )
    H.eliminate_zeros()
    sectors = _conserved_sectors(H, {k: v for k, v in labels.items() if v is not None})
    info["conserved"] = sectors[1]
    info["dimension"] = H.shape[0]
    if basis is not None:
        free_energy = free_energy[basis]
    return ModelHamiltonian(H, ops, tuple(dims), tuple(factors), sectors[0], info, occupations, basis, free_energy)


def _occupations(dims, pos) -> np.ndarray:
    left = int(np.prod(dims[:pos], dtype=np.int64))
    right = int(np.prod(dims[pos + 1:], dtype=np.int64))
    return np.tile(np.repeat(np.arange(dims[pos]), right), left)


def _conserved_sectors(H: sp.csr_matrix, candidates: dict):
    """Combine every candidate label that H does not mix into one sector id per state."""
    coo = H.tocoo()
    kept, names = [], []
    for name, lab in candidates.items():
        if np.all(lab[coo.row] == lab[coo.col]):
            kept.append(lab)
            names.append(name)
    if not kept:
        return np.zeros(H.shape[0], dtype=np.int64), []
    _, sector = np.unique(np.column_stack(kept), axis=0, return_inverse=True)
    return sector.ravel(), names


# ---------------------------------------------------------------------------
# spectra


class SpectralData:
    """Spectrum, Boltzmann weights and cached eigenbasis matrix elements.

    Energies are ascending. ``partition_function`` is ``sum_m exp(-beta (E_m - E_0))``,
    i.e. measured from the ground energy ``E_0``. States whose weight falls
    below ``weight_floor`` are *inactive*: matrix elements are cached only for
    rows of active states, and Lehmann pairs with both states inactive are
    dropped.
    """

    def __init__(self, energies, vectors, beta, weight_floor=1e-20):
        self.energies = np.asarray(energies, dtype=float)
        self.vectors = vectors
        self.beta = float(beta)
        self.ground_energy = float(self.energies[0])
        eps = self.energies - self.ground_energy
        boltz = np.exp(-self.beta * eps)
        self.partition_function = float(boltz.sum())
        self.weights = boltz / self.partition_function
        self.weight_floor = weight_floor
        self.active = np.nonzero(self.weights >= weight_floor)[0]
        self.matrix_elements = {}
        self._hermitian = {}
        self._full = {}

    @property
    def dimension(self) -> int:
        return len(self.energies)

    @property
    def all_active(self) -> bool:
        return len(self.active) == self.dimension

    def register(self, name: str, op) -> None:
        """Cache ``<m|op|m'>`` for active ``m`` and every ``m'``."""
        A = sp.csr_matrix(op) if not sp.issparse(op) else op.tocsr()
        if A.shape != (self.dimension, self.dimension):
            raise ParameterError(f"operator {name} has shape {A.shape}, expected {self.dimension}")
        hermitian = abs(A - A.conj().T).max() <= 1e-12 if A.nnz else True
        if not hermitian and not self.all_active:
            raise ParameterError(f"non-Hermitian operator {name} needs weight_floor=0 (all states active)")
        V = self.vectors
        V_S = V[:, self.active]
        rows = (A.conj().T @ V_S).conj().T @ V
        self.matrix_elements[name] = rows
        self._hermitian[name] = bool(hermitian)

    def full_matrix(self, name: str) -> np.ndarray:
        """Full eigenbasis matrix of a registered operator."""
        if name not in self._full:
            if self.all_active:
                self._full[name] = self.matrix_elements[name]
            else:
                raise ParameterError("full matrices need all states active (use weight_floor=0)")
        return self._full[name]

    def mean(self, name: str) -> complex:
        rows = self.matrix_elements[name]
        diag = rows[np.arange(len(self.active)), self.active]
        return complex(np.sum(self.weights[self.active] * diag))

    def to_csv(self, path_prefix) -> list:
        """Dump energies and active-row matrix elements for external auditing."""
        from pathlib import Path

        prefix = Path(path_prefix)
        lines = ["m,energy,weight"] + [f"{m},{e!r},{w!r}" for m, (e, w) in enumerate(zip(self.energies, self.weights))]
        paths = [prefix.with_name(prefix.name + "_energies.csv")]
        paths[0].write_text("\n".join(lines) + "\n")
        for name, rows in self.matrix_elements.items():
            out = ["m,mp,re,im"]
            for i, m in enumerate(self.active):
                for mp, v in enumerate(rows[i]):
                    if v != 0:
                        out.append(f"{m},{mp},{float(np.real(v))!r},{float(np.imag(v))!r}")
            p = prefix.with_name(f"{prefix.name}_{name}.csv")
            p.write_text("\n".join(out) + "\n")
            paths.append(p)
        return paths


def diagonalize(H, beta: float, sectors=None, weight_floor: float = 1e-20, hermitian_tol: float = 1e-10) -> SpectralData:
    """Dense diagonalization, block by block when ``sectors`` labels conserved blocks."""
    if isinstance(H, ModelHamiltonian):
        sectors = H.sectors if sectors is None else sectors
        H = H.matrix
    dense_input = not sp.issparse(H)
    M = np.asarray(H) if dense_input else H
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ParameterError("Hamiltonian must be a square matrix")
    defect = np.max(np.abs(M - M.conj().T)) if dense_input else (abs(M - M.conj().T).max() if M.nnz else 0.0)
    if defect > hermitian_tol:
        raise ParameterError(f"Hamiltonian is not Hermitian (max |H - H^dag| = {defect:.3e})")
    dim = M.shape[0]
    if sectors is None:
        sectors = np.zeros(dim, dtype=np.int64)
    dtype = complex if np.iscomplexobj(M.data if not dense_input else M) else float
    vectors = np.zeros((dim, dim), dtype=dtype)
    energies = np.empty(dim)
    col = 0
    csr = sp.csr_matrix(M) if dense_input else M.tocsr()
    for s in np.unique(sectors):
        idx = np.nonzero(sectors == s)[0]
        block = csr[idx][:, idx].toarray()
        e, v = np.linalg.eigh(block)
        energies[col:col + len(idx)] = e
        vectors[idx, col:col + len(idx)] = v
        col += len(idx)
    order = np.argsort(energies, kind="stable")
    return SpectralData(energies[order], vectors[:, order], beta, weight_floor)


def _pair_table(data: SpectralData, nameA: str, nameB: str):
    """(coefficient A_mm' B_m'm, m, m') for every pair with at least one active state."""
    rows_A = data.matrix_elements[nameA]
    rows_B = data.matrix_elements[nameB]
    S = data.active
    dim = data.dimension
    if data.all_active:
        # rows are full matrices: B_m'm = rows_B[m', m]
        coef = rows_A * rows_B.T
        m, mp = np.meshgrid(np.arange(dim), np.arange(dim), indexing="ij")
        return coef.ravel(), m.ravel(), mp.ravel()
    if not (data._hermitian[nameA] and data._hermitian[nameB]):
        raise ParameterError("pruned Lehmann sums need Hermitian operators")
    # m in S: A_mm' = rows_A[i, m'], B_m'm = conj(rows_B[i, m'])
    c1 = rows_A * rows_B.conj()
    m1 = np.repeat(S, dim)
    mp1 = np.tile(np.arange(dim), len(S))
    # m not in S, m' in S: A_mm' = conj(rows_A[i, m]), B_m'm = rows_B[i, m]
    inactive = np.ones(dim, dtype=bool)
    inactive[S] = False
    outside = np.nonzero(inactive)[0]
    c2 = rows_A[:, outside].conj() * rows_B[:, outside]
    m2 = np.tile(outside, len(S))
    mp2 = np.repeat(S, len(outside))
    return np.concatenate([c1.ravel(), c2.ravel()]), np.concatenate([m1, m2]), np.concatenate([mp1, mp2])


def lehmann_correlator(data: SpectralData, opA: str, opB: str, grid: MatsubaraGrid,
                       statistics=None, label: str = "", prune: float = 1e-24) -> CorrelatorSeries:
    """Matsubara correlator ``-<T A(tau) B>`` of two registered operators on ``grid``."""
    stats = grid.statistics if statistics is None else Statistics(statistics)
    if stats is not grid.statistics:
        raise StatisticsError("operator statistics do not match the grid")
    if not np.isclose(grid.beta, data.beta, rtol=1e-14, atol=0):
        raise ParameterError(f"grid beta {grid.beta} differs from spectral beta {data.beta}")
    beta = data.beta
    coef, m, mp = _pair_table(data, opA, opB)
    p = data.weights
    delta = data.energies[mp] - data.energies[m]
    x = beta * delta
    if stats is Statistics.BOSONIC:
        # p_m - p_m' = p_m (1 - e^{-beta delta}); expm1 keeps near-degenerate pairs exact
        small = np.abs(x) < 1.0
        num = np.where(small, -p[m] * np.expm1(-np.where(small, x, 0.0)), p[m] - p[mp])
    else:
        num = p[m] + p[mp]
    c = coef * num
    keep = np.abs(c) > prune
    if stats is Statistics.BOSONIC:
        # static limit needs the degenerate pairs even though num vanishes there
        degenerate = delta == 0
        keep_static = keep | (degenerate & (np.abs(coef * p[m]) > prune))
    c, d = c[keep], delta[keep]
    c_re = np.ascontiguousarray(np.real(c))
    c_im = np.ascontiguousarray(np.imag(c))
    vals = np.empty(grid.size, dtype=complex)
    for k, w in enumerate(grid.frequencies):
        if w == 0 and stats is Statistics.BOSONIC:
            vals[k] = _static_value(coef[keep_static], p[m[keep_static]], delta[keep_static], beta)
            continue
        den = d * d + w * w
        k_re = -d / den
        k_im = -w / den
        vals[k] = complex(c_re @ k_re - c_im @ k_im, c_re @ k_im + c_im @ k_re)
    meta = {"source": "lehmann", "pairs": int(keep.sum()), "active_states": int(len(data.active))}
    return CorrelatorSeries(grid, vals, label or f"<{opA};{opB}>", stats, metadata=meta)


def _static_value(coef, p_m, delta, beta) -> complex:
    """Bosonic w_n = 0 term: sum coef * (p_m - p_m') / (-delta), with -beta p_m at delta = 0."""
    x = beta * delta
    # (p_m - p_m')/(-delta) = p_m * expm1(-x) / delta = -beta p_m * expm1(-x)/(-x)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(x == 0, 1.0, np.expm1(-x) / np.where(x == 0, 1.0, -x))
    big = np.abs(x) > 700
    ratio = np.where(big, np.nan, ratio)
    term = -beta * p_m * ratio
    if np.any(big):
        # such pairs only survive pruning when p_m' carries the weight; use it directly
        term = np.where(big, p_m * np.expm1(np.minimum(-x, 700)) / np.where(big, delta, 1.0), term)
    return complex(np.sum(coef * term))


# ---------------------------------------------------------------------------
# imaginary-time products and Wick residual


def imaginary_time_product(data: SpectralData, name: str, taus) -> complex:
    """``<T O(tau_1) ... O(tau_k)>`` for one bosonic registered operator at distinct taus in (0, beta)."""
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0) or np.any(taus >= data.beta):
        raise ParameterError("taus must lie in (0, beta)")
    if len(np.unique(taus)) != len(taus):
        raise DegenerateTimeError(f"coincident imaginary times {taus.tolist()}")
    O = data.full_matrix(name)
    t = np.sort(taus)[::-1]
    eps = data.energies - data.ground_energy
    # Tr[e^{-(beta - t1 + tk) H} O e^{-(t1 - t2) H} O ... O] / Z
    acc = np.exp(-(data.beta - t[0] + t[-1]) * eps)[:, None] * O
    for a, b in zip(t[:-1], t[1:]):
        acc = (acc * np.exp(-(a - b) * eps)[None, :]) @ O
    return complex(np.trace(acc) / data.partition_function)


def wick_residual(data: SpectralData, name: str, taus, mean_tol: float = 1e-10) -> complex:
    """Four-point function minus its three pair factorizations.

    The operator must be mean-free in the state ``data`` describes. Vanishes
    for operators linear in the normal modes of a quadratic Hamiltonian.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.shape != (4,):
        raise ParameterError("wick_residual needs exactly four times")
    if len(np.unique(taus)) != 4:
        raise DegenerateTimeError(f"coincident imaginary times {taus.tolist()}")
    mean = data.mean(name)
    if abs(mean) > mean_tol:
        raise ParameterError(f"operator {name} has thermal mean {mean:.3e}; subtract it first")
    g4 = imaginary_time_product(data, name, taus)

    def g2(i, j):
        return imaginary_time_product(data, name, taus[[i, j]])

    pairs = g2(0, 1) * g2(2, 3) + g2(0, 2) * g2(1, 3) + g2(0, 3) * g2(1, 2)
    return g4 - pairs


# ---------------------------------------------------------------------------
# readout experiment


@dataclass(eq=False)
class ReadoutReport:
    """Output of :func:`readout_experiment`.

    ``relative_deviation`` and ``absolute_deviation`` compare the extracted
    series with ``C_S0`` per frequency; ``conditioning`` is
    ``|1/D_RB| / (lam^2 |extracted|)``, the factor by which relative errors of
    the detector correlators are amplified in the extraction.
    """

    dressed: DressedSet
    relative_deviation: np.ndarray
    absolute_deviation: np.ndarray
    deviation_norm: float
    conditioning: np.ndarray
    truncation: Truncation
    convergence: dict = field(default_factory=dict)

    @property
    def max_relative_deviation(self) -> float:
        return float(np.max(self.relative_deviation))


MAX_REFINEMENTS = 8


def _adaptive_factors(t: Truncation, n_bath: int) -> set:
    out = set()
    if t.n_max_cavity is None:
        out.add("cavity")
    if t.n_max_oscillator is None:
        out.add("oscillator")
    if t.n_max_bath_mode is None:
        out.update(f"bath{i}" for i in range(n_bath))
    return out


def top_level_weights(model: ModelHamiltonian, data: SpectralData) -> dict:
    """Thermal weight of the two highest retained levels of every boson factor.

    Returns ``{factor: (P(n_max), P(n_max - 1))}`` in the thermal state of
    ``data``; lattice factors are skipped.
    """
    S = data.active
    prob = (np.abs(data.vectors[:, S]) ** 2) @ data.weights[S]
    out = {}
    for pos, name in enumerate(model.factors):
        if name == "lattice":
            continue
        occ = model.occupations[name]
        top = model.dims[pos] - 1
        out[name] = (float(prob[occ == top].sum()), float(prob[occ == top - 1].sum()))
    return out


def _shell_weights(model: ModelHamiltonian, data: SpectralData, cap: float, width: float):
    """Thermal weight in the outermost free-energy shell below ``cap`` and in the shell beneath it."""
    S = data.active
    prob = (np.abs(data.vectors[:, S]) ** 2) @ data.weights[S]
    e = model.free_energy
    outer = prob[e > cap - width].sum()
    inner = prob[(e > cap - 2 * width) & (e <= cap - width)].sum()
    return float(outer), float(inner)


def _bump(t: Truncation, name: str, k: int, spec: SystemSpec | None = None) -> Truncation:
    if name == "energy_cap":
        return replace(t, energy_cap=t.energy_cap + k * min(_boson_frequencies(spec, True)))
    if name == "cavity":
        return replace(t, n_max_cavity=t.n_max_cavity + k)
    if name == "oscillator":
        return replace(t, n_max_oscillator=t.n_max_oscillator + k)
    i = int(name[4:])
    return replace(t, n_max_bath_mode=tuple(b + k if j == i else b for j, b in enumerate(t.n_max_bath_mode)))


def solve_spectrum(spec: SystemSpec, include_simulator: bool = True, include_detector: bool = True,
                   weight_floor: float = 1e-20):
    """Build, diagonalize and register operators, refining unset cutoffs.

    Unset cutoffs start from the free-mode thermal rule. When
    ``spec.truncation.dressed`` holds, every such cutoff whose top level
    carries thermal weight ``>= thermal_tol`` in the coupled state is raised
    (by a geometric extrapolation of the level populations) and the system is
    rediagonalized. Returns ``(model, data, truncation)``.
    """
    t0 = spec.truncation
    trunc = resolve_truncation(spec)
    adaptive = _adaptive_factors(t0, len(spec.detector.bath.modes)) if t0.dressed else set()
    adaptive_cap = t0.dressed and t0.energy_cap == "auto"
    for _ in range(MAX_REFINEMENTS + 1):
        current = replace(spec, truncation=trunc)
        model = build_hamiltonian(current, include_simulator, include_detector)
        data = diagonalize(model, spec.beta, weight_floor=weight_floor)
        raised = False
        for name, (p_top, p_prev) in top_level_weights(model, data).items():
            if name not in adaptive or p_top < t0.thermal_tol:
                continue
            ratio = min(max(p_top / p_prev, 1e-6), 0.5) if p_prev > 0 else 0.5
            k = max(1, int(np.ceil(np.log(t0.thermal_tol / p_top) / np.log(ratio))))
            trunc = _bump(trunc, name, k)
            raised = True
        if adaptive_cap and model.free_energy is not None:
            step = min(_boson_frequencies(spec, include_simulator))
            w_out, w_in = _shell_weights(model, data, trunc.energy_cap, step)
            if w_out >= t0.thermal_tol:
                ratio = min(max(w_out / w_in, 1e-6), 0.5) if w_in > 0 else 0.5
                k = max(1, int(np.ceil(np.log(t0.thermal_tol / w_out) / np.log(ratio))))
                trunc = replace(trunc, energy_cap=trunc.energy_cap + k * step)
                raised = True
        if not raised:
            break
    else:
        raise ConvergenceError(f"cutoffs still rising after {MAX_REFINEMENTS} refinements: {trunc}")
    for name, op in model.operators.items():
        data.register(name, op)
    return model, data, trunc


def _correlators(spec: SystemSpec, grid: MatsubaraGrid, weight_floor):
    """D_R and C_S of the coupled system plus D_RB of the detector alone."""
    _, full, trunc = solve_spectrum(spec, weight_floor=weight_floor)
    D_R = lehmann_correlator(full, "Gamma_R", "Gamma_R", grid, label="D_R")
    C_S = lehmann_correlator(full, "O_S", "O_S", grid, label="C_S")
    _, det, _ = solve_spectrum(spec, include_simulator=False, weight_floor=weight_floor)
    D_RB = lehmann_correlator(det, "Gamma_R", "Gamma_R", grid, label="D_RB")
    return (D_R, C_S, D_RB), trunc


def readout_experiment(spec: SystemSpec, grid: MatsubaraGrid, check_convergence: bool = False,
                       truncation_tol: float = 1e-6, convergence_step: int = 4,
                       weight_floor: float = 1e-20) -> ReadoutReport:
    """Simulate the detector readout of ``spec`` by ED and extract the simulator correlator.

    D_RB (detector and bath alone), D_R and C_S (full system) and C_S0
    (simulator alone) are Lehmann correlators; the extracted series is
    ``(1/D_RB - 1/D_R) / lam^2``. With ``check_convergence`` every cutoff of
    the full system is raised by ``convergence_step`` in turn and D_RB, D_R,
    C_S and the extracted series must move by at most ``truncation_tol``
    (relative, per frequency); otherwise :class:`ConvergenceError` is raised.
    """
    if spec.lam == 0:
        raise ExtractionError("extraction is undefined at lambda = 0")
    if spec.simulator is None:
        raise ParameterError("readout_experiment needs a simulator")
    if grid.statistics is not Statistics.BOSONIC:
        raise StatisticsError("readout correlators are bosonic")

    (D_R, C_S, D_RB), trunc = _correlators(spec, grid, weight_floor)
    _, sim, _ = solve_spectrum(spec, include_detector=False, weight_floor=weight_floor)
    C_S0 = lehmann_correlator(sim, "O_S", "O_S", grid, label="C_S0")
    bare_spec = replace(spec, detector=DetectorSpec(spec.detector.omega_d, DiscreteBath(())),
                        truncation=replace(trunc, n_max_bath_mode=(), dressed=False))
    _, cav, _ = solve_spectrum(bare_spec, include_simulator=False, weight_floor=weight_floor)
    D_R0 = lehmann_correlator(cav, "Gamma_R", "Gamma_R", grid, label="D_R0")

    ext = extract(D_RB, D_R, spec.lam)
    e, c0 = ext.to_complex(), C_S0.to_complex()
    absdev = np.abs(e - c0)
    reldev = absdev / np.abs(c0)
    cond = np.abs(1 / D_RB.to_complex()) / (spec.lam**2 * np.abs(e))

    convergence = {}
    if check_convergence:
        fixed = replace(spec, truncation=replace(trunc, dressed=False))
        convergence = _check_convergence(fixed, grid, (D_R, C_S, D_RB, ext), truncation_tol,
                                         convergence_step, weight_floor)

    prov = {
        "scenario": "ed",
        "simulator": type(spec.simulator).__name__,
        "simulator_params": vars(spec.simulator).copy(),
        "omega_d": spec.detector.omega_d,
        "bath": [{"c": m.c, "omega": m.omega} for m in spec.detector.bath.modes],
        "lambda": spec.lam,
        "beta": spec.beta,
        "mean_subtract": spec.mean_subtract,
        "truncation": {"n_max_cavity": trunc.n_max_cavity, "n_max_oscillator": trunc.n_max_oscillator,
                       "n_max_bath_mode": list(trunc.n_max_bath_mode), "thermal_tol": trunc.thermal_tol,
                       "dressed": trunc.dressed,
                       "energy_cap": None if trunc.energy_cap is None else float(trunc.energy_cap)},
        "weight_floor": weight_floor,
        "convention": ORDERING_CONVENTION,
        "grid": {"beta": grid.beta, "statistics": grid.statistics.value, "N": grid.N},
    }
    if convergence:
        prov["truncation_check"] = convergence
    dressed = DressedSet(D_R0, D_RB, D_R, C_S0, C_S, ext.relabel("extracted"), prov)
    return ReadoutReport(dressed, reldev, absdev, float(np.linalg.norm(e - c0)), cond, trunc, convergence)


def _check_convergence(spec, grid, reference, tol, step, weight_floor) -> dict:
    t = spec.truncation
    names = ["cavity"]
    if isinstance(spec.simulator, OscillatorSpec):
        names.append("oscillator")
    names += [f"bath{i}" for i in range(len(t.n_max_bath_mode))]
    if t.energy_cap is not None:
        names.append("energy_cap")
    report = {}
    for name in names:
        bigger = replace(spec, truncation=_bump(t, name, step, spec))
        (D_R, C_S, D_RB), _ = _correlators(bigger, grid, weight_floor)
        new = (D_R, C_S, D_RB, extract(D_RB, D_R, spec.lam))
        worst = max(float(np.max(np.abs(b.to_complex() - a.to_complex()) / np.abs(a.to_complex())))
                    for a, b in zip(reference, new))
        report[name] = worst
        logger.info("truncation check %s +%d: max relative change %.3e", name, step, worst)
        if worst > tol:
            raise ConvergenceError(
                f"raising the {name} cutoff by {step} changed correlators by {worst:.3e} "
                f"> truncation tolerance {tol:g}"
            )
    return report
