import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    boson_ops,
    fock_chain,
    matsubara_by_quadrature,
    normal_mode_ground_energy,
    thermal_trace_product,
    wick_residual_expm,
)
from detector_readout import (
    ConvergenceError,
    CouplingSpec,
    DegenerateTimeError,
    DetectorSpec,
    DimensionError,
    DiscreteBath,
    ExtractionError,
    FlatBath,
    LatticeSpec,
    ORDERING_CONVENTION,
    OscillatorSpec,
    ParameterError,
    SpecMismatchError,
    SystemSpec,
    Truncation,
    build_hamiltonian,
    cavity_bare,
    detector_with_bath,
    diagonalize,
    freq_to_tau,
    imaginary_time_product,
    lehmann_correlator,
    local_density_bubble,
    make_grid,
    readout_experiment,
    relative_error,
    solve_spectrum,
    thermal_cutoff,
    wick_residual,
)
from detector_readout.ed import hilbert_dimension, lattice_hamiltonian

# frozen from the direct four-point Lehmann trace; the expm oracle below reproduces it to 1e-15
WICK_CHAIN2_OPEN = -0.022514021791173608
TAUS = (0.2, 0.6, 1.0, 1.4)

BATH = DiscreteBath(((0.1, 0.9), (0.1, 1.1)))


def cavity_only(n_max=None, beta=5.0, bath=DiscreteBath(())):
    return SystemSpec(DetectorSpec(1.0, bath), None, CouplingSpec(0.0), beta, Truncation(n_max_cavity=n_max))


# -- Hamiltonian -------------------------------------------------------------


def test_single_cavity_spectrum():
    model = build_hamiltonian(cavity_only(2), include_simulator=False)
    assert np.allclose(np.linalg.eigvalsh(model.matrix.toarray()), [0, 1, 2], atol=1e-14)


def test_decoupled_oscillators_spectrum():
    spec = SystemSpec(DetectorSpec(1.0), OscillatorSpec(0.8), CouplingSpec(0.0), 5.0,
                      Truncation(n_max_cavity=3, n_max_oscillator=2))
    e = np.linalg.eigvalsh(build_hamiltonian(spec).matrix.toarray())
    expected = sorted(na + 0.8 * ns for na in range(4) for ns in range(3))
    assert np.allclose(e, expected, atol=1e-14)


@pytest.mark.parametrize("lam", [0.05, 0.1, 0.2])
def test_coupled_oscillators_ground_energy(lam):
    spec = SystemSpec(DetectorSpec(1.0), OscillatorSpec(0.8), CouplingSpec(lam), 5.0,
                      Truncation(n_max_cavity=12, n_max_oscillator=12))
    e0 = np.linalg.eigvalsh(build_hamiltonian(spec).matrix.toarray())[0]
    assert np.isclose(e0, normal_mode_ground_energy(1.0, 0.8, lam), rtol=0, atol=1e-12)


def test_hamiltonian_has_counter_rotating_terms():
    # a rotating-wave coupling would conserve excitation number; the full coupling links |0,0> and |1,1>
    spec = SystemSpec(DetectorSpec(1.0), OscillatorSpec(0.8), CouplingSpec(0.1), 5.0,
                      Truncation(n_max_cavity=2, n_max_oscillator=2))
    H = build_hamiltonian(spec).matrix.toarray()
    # <1_a 1_s | H | 0_a 0_s> = lam
    assert np.isclose(H[4, 0], 0.1)


def test_dimension_budget():
    spec = SystemSpec(DetectorSpec(1.0, BATH), OscillatorSpec(0.8), CouplingSpec(0.1), 5.0,
                      Truncation(n_max_cavity=20, n_max_oscillator=20, n_max_bath_mode=20), dimension_budget=1000)
    assert hilbert_dimension(spec) == 21**4
    with pytest.raises(DimensionError) as exc:
        build_hamiltonian(spec)
    assert exc.value.dimension == 21**4


def test_system_spec_rejects_flat_bath():
    with pytest.raises(SpecMismatchError):
        SystemSpec(DetectorSpec(1.0, FlatBath(0.1)), None, CouplingSpec(0.0), 5.0)


@pytest.mark.parametrize("omega, beta", [(1.0, 5.0), (0.8, 2.0), (0.3, 10.0)])
def test_thermal_cutoff_rule(omega, beta):
    n = thermal_cutoff(omega, beta, 1e-12)
    z = 1 / (1 - np.exp(-beta * omega))
    assert np.exp(-beta * omega * n) / z < 1e-12
    assert n == 1 or np.exp(-beta * omega * (n - 1)) / z >= 1e-12


def test_lattice_hamiltonian_matches_dense_oracle():
    for periodic in (True, False):
        lat = LatticeSpec(3, hopping=0.7, mu=0.2, boundary="periodic" if periodic else "open")
        H, dens, N = lattice_hamiltonian(lat)
        Href, dref = fock_chain(3, 0.7, 0.2, periodic)
        assert np.allclose(H.toarray(), Href, atol=1e-14)
        for a, b in zip(dens, dref):
            assert np.allclose(a.toarray(), b)


def test_ordering_convention_is_recorded():
    spec = SystemSpec(DetectorSpec(1.0), LatticeSpec(2), CouplingSpec(0.1), 2.0, Truncation(n_max_cavity=3))
    assert build_hamiltonian(spec).info["convention"] == ORDERING_CONVENTION


# -- diagonalization ---------------------------------------------------------


def test_diagonalize_trivial_inputs():
    d = diagonalize(np.diag([3.0, 1.0, 2.0]), 1.0)
    assert np.allclose(d.energies, [1, 2, 3])
    d = diagonalize(np.array([[0.0, 1.0], [1.0, 0.0]]), 1.0)
    assert np.allclose(d.energies, [-1, 1])
    d = diagonalize(np.diag([0.0, 1.0, 5.0, 7.0]), 0.0)
    assert d.partition_function == 4.0


def test_diagonalize_rejects_non_hermitian():
    with pytest.raises(ParameterError):
        diagonalize(np.array([[0.0, 1.0], [0.0, 0.0]]), 1.0)


def test_sector_blocks_do_not_change_spectrum():
    spec = SystemSpec(DetectorSpec(1.0, BATH), OscillatorSpec(0.8), CouplingSpec(0.1), 5.0,
                      Truncation(n_max_cavity=4, n_max_oscillator=4, n_max_bath_mode=3))
    model = build_hamiltonian(spec)
    blocked = diagonalize(model, 5.0)
    full = np.linalg.eigvalsh(model.matrix.toarray())
    assert len(np.unique(model.sectors)) > 1
    assert np.allclose(blocked.energies, full, atol=1e-12)


def test_spectral_data_invariants():
    _, data, _ = solve_spectrum(SystemSpec(DetectorSpec(1.0, BATH), OscillatorSpec(0.8), CouplingSpec(0.1), 2.0,
                                           Truncation(n_max_cavity=4, n_max_oscillator=4, n_max_bath_mode=3)),
                                weight_floor=0.0)
    assert np.all(np.diff(data.energies) >= 0)
    assert data.partition_function > 0
    M = data.full_matrix("Gamma_R")
    assert np.allclose(M, M.conj().T, atol=1e-12)


def test_non_hermitian_operator_needs_all_states():
    a, _ = boson_ops(3)
    data = diagonalize(np.diag(np.arange(4.0)), 50.0, weight_floor=1e-10)
    with pytest.raises(ParameterError):
        data.register("a", a)
    data = diagonalize(np.diag(np.arange(4.0)), 50.0, weight_floor=0.0)
    data.register("a", a)


# -- Lehmann correlators -----------------------------------------------------


def _toy(seed, degenerate):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    e = np.array([0.0, 0.7, 0.7]) if degenerate else np.array([0.0, 0.4, 1.3])
    H = q @ np.diag(e) @ q.T
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(3, 3))
    return H, A + A.T, B + B.T


@pytest.mark.parametrize("degenerate", [False, True])
@pytest.mark.parametrize("stats, ns", [("bosonic", (-2, 0, 1, 3)), ("fermionic", (0, 1, 2))])
def test_lehmann_matches_tau_quadrature(degenerate, stats, ns):
    beta = 2.0
    H, A, B = _toy(7, degenerate)
    data = diagonalize(H, beta, weight_floor=0.0)
    data.register("A", A)
    data.register("B", B)
    g = make_grid(beta, stats, 3)
    series = lehmann_correlator(data, "A", "B", g)
    for n in ns:
        ref = matsubara_by_quadrature(H, A, B, beta, g.frequencies[g.position(n)])
        assert abs(series.at(n) - ref) < 1e-10 * max(1.0, abs(ref))


def test_lehmann_reproduces_cavity_bare():
    beta = 5.0
    n_max = thermal_cutoff(1.0, beta, 1e-12)
    model = build_hamiltonian(cavity_only(n_max), include_simulator=False)
    data = diagonalize(model, beta)
    data.register("x", model.operators["Gamma_R"])
    g = make_grid(beta, "bosonic", 64)
    # a truncated oscillator misses the top-level matrix element, an error ~ n_max e^{-beta n_max}
    assert np.max(relative_error(lehmann_correlator(data, "x", "x", g), cavity_bare(1.0, g))) < 1e-8


def test_lehmann_error_shrinks_with_cutoff():
    beta, g = 1.0, make_grid(1.0, "bosonic", 8)
    errs = []
    for n_max in (10, 20, 30):
        model = build_hamiltonian(cavity_only(n_max, beta), include_simulator=False)
        data = diagonalize(model, beta, weight_floor=0.0)
        data.register("x", model.operators["Gamma_R"])
        errs.append(np.max(relative_error(lehmann_correlator(data, "x", "x", g), cavity_bare(1.0, g))))
    assert errs[0] > errs[1] > errs[2]


def test_identity_fluctuation_is_zero():
    data = diagonalize(np.diag([0.0, 0.3, 1.1]), 2.0, weight_floor=0.0)
    I = np.eye(3)
    data.register("dI", I - data.weights.sum() * I)
    s = lehmann_correlator(data, "dI", "dI", make_grid(2.0, "bosonic", 4))
    assert np.allclose(s.to_complex(), 0, atol=1e-15)


def test_discrete_bath_ed_matches_dyson():
    beta = 5.0
    g = make_grid(beta, "bosonic", 16)
    _, data, _ = solve_spectrum(cavity_only(None, beta, BATH), include_simulator=False)
    ed = lehmann_correlator(data, "Gamma_R", "Gamma_R", g)
    ref = detector_with_bath(DetectorSpec(1.0, BATH), g)
    assert np.max(relative_error(ed, ref)) < 1e-6


def test_lehmann_hermitian_symmetry_and_kms():
    beta = 5.0
    _, data, _ = solve_spectrum(cavity_only(None, beta, BATH), include_simulator=False)
    s = lehmann_correlator(data, "Gamma_R", "Gamma_R", make_grid(beta, "bosonic", 256))
    assert s.conj_symmetry_defect() == 0.0
    ends = freq_to_tau(s, [0.0, beta], tail_correction=True).values
    assert abs(ends[0] - ends[1]) < 1e-6 * abs(ends[0])


def test_free_chain_density_correlator_is_the_bubble():
    # two-point functions of a free chain obey Wick, so ED equals the bubble exactly
    beta = 5.0
    lat = LatticeSpec(4)
    spec = SystemSpec(DetectorSpec(1.0), lat, CouplingSpec(0.0), beta)
    _, data, _ = solve_spectrum(spec, include_detector=False)
    g = make_grid(beta, "bosonic", 32)
    ed = lehmann_correlator(data, "O_S", "O_S", g)
    assert np.allclose(ed.to_complex(), local_density_bubble(lat, g).to_complex(), rtol=1e-10, atol=1e-14)


def test_spectral_dump_is_deterministic(tmp_path):
    data = diagonalize(np.array([[0.0, 0.2], [0.2, 1.0]]), 2.0)
    data.register("X", np.array([[0.0, 1.0], [1.0, 0.0]]))
    p1 = [p.read_bytes() for p in data.to_csv(tmp_path / "a")]
    p2 = [p.read_bytes() for p in data.to_csv(tmp_path / "b")]
    assert p1 == p2
    assert p1[0].decode().splitlines()[0] == "m,energy,weight"


# -- Wick residual -----------------------------------------------------------


def _oscillator_data(beta, n_max):
    spec = SystemSpec(DetectorSpec(1.0), OscillatorSpec(0.8), CouplingSpec(0.0), beta,
                      Truncation(n_max_oscillator=n_max))
    return solve_spectrum(spec, include_detector=False, weight_floor=0.0)[1]


def _chain_data(beta=2.0, boundary="open"):
    spec = SystemSpec(DetectorSpec(1.0), LatticeSpec(2, boundary=boundary), CouplingSpec(0.0), beta)
    return solve_spectrum(spec, include_detector=False, weight_floor=0.0)[1]


@pytest.mark.parametrize("taus", [TAUS, (0.1, 0.5, 1.2, 1.9), (1.7, 0.3, 0.9, 1.1)])
def test_wick_holds_for_quadrature(taus):
    assert abs(wick_residual(_oscillator_data(2.0, 30), "O_S", taus)) <= 1e-10


def test_wick_residual_of_quadrature_shrinks_with_cutoff():
    # truncation leaves a residual ~ top-level weight; it vanishes as n_max grows
    r = [abs(wick_residual(_oscillator_data(2.0, n), "O_S", TAUS)) for n in (10, 18, 30)]
    assert r[0] > r[1] > r[2]


def test_wick_fails_for_site_density():
    r = wick_residual(_chain_data(), "O_S", TAUS)
    assert abs(r.imag) < 1e-15
    assert np.isclose(r.real, WICK_CHAIN2_OPEN, rtol=1e-12, atol=0)
    assert abs(r) > 1e-8


def test_wick_residual_matches_expm_oracle():
    H, dens = fock_chain(2, periodic=False)
    e, v = np.linalg.eigh(H)
    p = np.exp(-2.0 * (e - e[0]))
    p /= p.sum()
    O = dens[0] - np.sum(p * np.diag(v.T @ dens[0] @ v)) * np.eye(4)
    ref = wick_residual_expm(H, O, 2.0, TAUS)
    assert abs(ref - WICK_CHAIN2_OPEN) < 1e-14


def test_periodic_two_site_chain_has_double_bond():
    # both bonds join sites 1 and 2, doubling the hopping; the residual differs from the open chain
    H, dens = fock_chain(2, hopping=2.0, periodic=False)
    e, v = np.linalg.eigh(H)
    p = np.exp(-2.0 * (e - e[0]))
    p /= p.sum()
    O = dens[0] - np.sum(p * np.diag(v.T @ dens[0] @ v)) * np.eye(4)
    assert np.isclose(wick_residual(_chain_data(boundary="periodic"), "O_S", TAUS),
                      wick_residual_expm(H, O, 2.0, TAUS), rtol=1e-10, atol=1e-16)


@settings(max_examples=24, deadline=None)
@given(perm=st.permutations(list(range(4))))
def test_wick_residual_permutation_symmetry(perm):
    data = _chain_data()
    shuffled = [TAUS[i] for i in perm]
    assert np.isclose(wick_residual(data, "O_S", shuffled), WICK_CHAIN2_OPEN, rtol=1e-12, atol=0)


def test_imaginary_time_product_matches_expm():
    H, dens = fock_chain(3)
    data = diagonalize(H, 1.5, weight_floor=0.0)
    data.register("n", dens[0])
    taus = [0.2, 1.1, 0.7]
    ref = thermal_trace_product(H, [(dens[0], t) for t in taus], 1.5)
    assert np.isclose(imaginary_time_product(data, "n", taus), ref, rtol=1e-12)


def test_wick_errors():
    data = _chain_data()
    with pytest.raises(DegenerateTimeError):
        wick_residual(data, "O_S", (0.2, 0.2, 1.0, 1.4))
    with pytest.raises(ParameterError):
        wick_residual(data, "O_S", (0.2, 0.6, 1.0))
    spec = SystemSpec(DetectorSpec(1.0), LatticeSpec(2, boundary="open"), CouplingSpec(0.0), 2.0, mean_subtract=False)
    raw = solve_spectrum(spec, include_detector=False, weight_floor=0.0)[1]
    with pytest.raises(ParameterError):
        wick_residual(raw, "O_S", TAUS)


# -- readout experiment ------------------------------------------------------


def _oscillator_spec(lam, beta=5.0, **trunc):
    return SystemSpec(DetectorSpec(1.0, BATH), OscillatorSpec(0.8), CouplingSpec(lam), beta, Truncation(**trunc))


def test_readout_experiment_lambda_zero():
    with pytest.raises(ExtractionError):
        readout_experiment(_oscillator_spec(0.0), make_grid(5.0, "bosonic", 4))


def test_readout_experiment_small_oscillator_case():
    g = make_grid(5.0, "bosonic", 2)
    rep = readout_experiment(_oscillator_spec(0.1, energy_cap="auto"), g)
    assert rep.max_relative_deviation < 1e-6
    assert rep.dressed.provenance["convention"] == ORDERING_CONVENTION
    assert isinstance(rep.dressed.provenance["truncation"]["energy_cap"], float)
    assert np.allclose(rep.dressed.D_R0.to_complex(), cavity_bare(1.0, g).to_complex(), rtol=1e-8)


def test_truncation_check_catches_small_cutoffs():
    g = make_grid(1.0, "bosonic", 2)
    spec = _oscillator_spec(0.1, beta=1.0, n_max_cavity=3, n_max_oscillator=3, n_max_bath_mode=2, dressed=False)
    with pytest.raises(ConvergenceError):
        readout_experiment(spec, g, check_convergence=True)


def test_energy_cap_converges_to_box():
    g = make_grid(2.0, "bosonic", 3)
    sizes = dict(n_max_cavity=6, n_max_oscillator=6, n_max_bath_mode=4, dressed=False)
    box = readout_experiment(_oscillator_spec(0.1, beta=2.0, **sizes), g).dressed
    # the largest unperturbed box energy is 6 + 0.8 * 6 + (0.9 + 1.1) * 4 = 18.8
    full = readout_experiment(_oscillator_spec(0.1, beta=2.0, energy_cap=19.0, **sizes), g).dressed
    for name in ("D_R", "D_RB", "C_S"):
        assert np.max(relative_error(getattr(full, name), getattr(box, name))) < 1e-12
    errs = []
    for cap in (5.0, 8.0, 11.0):
        capped = readout_experiment(_oscillator_spec(0.1, beta=2.0, energy_cap=cap, **sizes), g).dressed
        errs.append(np.max(relative_error(capped.D_R, box.D_R)))
    assert errs[0] > errs[1] > errs[2]
