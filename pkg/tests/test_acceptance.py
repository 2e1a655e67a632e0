"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``PASS``/``FAIL`` line; the lines are repeated in
the pytest terminal summary.
"""
import time

import numpy as np
import pytest

import conftest
from oracles import bubble_internal_sum, tight_binding
from detector_readout import (
    CouplingSpec,
    DetectorSpec,
    DiscreteBath,
    FlatBath,
    LatticeSpec,
    OscillatorSpec,
    SystemSpec,
    Truncation,
    bubble_decay_constant,
    cavity_bare,
    cavity_bare_tau,
    continue_rational,
    density_bubble,
    detector_full_oscillator,
    detector_with_bath,
    extract,
    fermi,
    flat_bath_form,
    free_fermion_propagator,
    freq_to_tau,
    make_grid,
    oscillator_bare,
    oscillator_readout,
    pade_continue,
    pade_fit,
    pade_poles,
    readout_experiment,
    relative_error,
    sample_tau,
    solve_spectrum,
    tau_to_freq,
    wick_residual,
)

LAMBDAS = (0.05, 0.1, 0.2)
BATH_MODES = DiscreteBath(((0.1, 0.9), (0.1, 1.1)))
FLAT = DetectorSpec(1.0, FlatBath(0.1, 0.0))
WICK_TAUS = (0.2, 0.6, 1.0, 1.4)
# frozen from the direct four-point Lehmann trace of the open 2-site chain
WICK_CHAIN2_OPEN = -0.022514021791173608


def report(k, ok, detail, seconds=None):
    line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
    if seconds is not None:
        line += f" [{seconds:.1f} s]"
    print(line)
    conftest.ACCEPTANCE_LINES[k] = line
    assert ok, line


def test_criterion_1_extraction_identity():
    t0 = time.perf_counter()
    g = make_grid(5.0, "bosonic", 256)
    # the cancellation in 1/D_RB - 1/D_R costs ~lam^2/w_n^4 relative digits; mp arithmetic keeps 1e-12 at n = 256
    drb = detector_with_bath(FLAT, g, dps=40)
    cs0 = oscillator_bare(0.8, g, dps=40)
    worst = max(np.max(relative_error(extract(drb, detector_full_oscillator(drb, cs0, lam), lam), cs0))
                for lam in LAMBDAS)
    dt = time.perf_counter() - t0
    report(1, worst <= 1e-12 and dt < 1.0, f"max rel error {worst:.2e} (<= 1e-12), runtime < 1 s", dt)


def test_criterion_2_nonperturbative_oscillator_readout():
    t0 = time.perf_counter()
    g = make_grid(5.0, "bosonic", 4)
    extracted, worst = {}, 0.0
    for lam in LAMBDAS:
        spec = SystemSpec(DetectorSpec(1.0, BATH_MODES), OscillatorSpec(0.8), CouplingSpec(lam), 5.0,
                          Truncation(energy_cap="auto"))
        rep = readout_experiment(spec, g)
        extracted[lam] = rep.dressed.extracted
        worst = max(worst, rep.max_relative_deviation)
    spread = max(np.max(relative_error(extracted[lam], extracted[0.1])) for lam in LAMBDAS)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and spread <= 1e-6 and dt < 120
    report(2, ok, f"vs ED C_S0 {worst:.2e}, lambda spread {spread:.2e} (<= 1e-6)", dt)


def test_criterion_3_wick_dichotomy():
    t0 = time.perf_counter()
    osc = SystemSpec(DetectorSpec(1.0), OscillatorSpec(0.8), CouplingSpec(0.0), 2.0, Truncation(n_max_oscillator=30))
    quad = abs(wick_residual(solve_spectrum(osc, include_detector=False, weight_floor=0.0)[1], "O_S", WICK_TAUS))
    chain = SystemSpec(DetectorSpec(1.0), LatticeSpec(2, hopping=1.0, mu=0.0, boundary="open"), CouplingSpec(0.0), 2.0)
    dens = wick_residual(solve_spectrum(chain, include_detector=False, weight_floor=0.0)[1], "O_S", WICK_TAUS)
    dt = time.perf_counter() - t0
    ok = quad <= 1e-10 and abs(dens) > 1e-8 and np.isclose(dens, WICK_CHAIN2_OPEN, rtol=1e-10, atol=0) and dt < 10
    report(3, ok, f"quadrature {quad:.2e} (<= 1e-10), density {dens.real:.6e} (pinned {WICK_CHAIN2_OPEN:.6e})", dt)


def test_criterion_4_backaction_scaling():
    t0 = time.perf_counter()
    g = make_grid(5.0, "bosonic", 8)
    norms = {}
    for lam in (0.05, 0.1):
        spec = SystemSpec(DetectorSpec(1.0, BATH_MODES), LatticeSpec(4), CouplingSpec(lam), 5.0,
                          Truncation(energy_cap="auto"))
        norms[lam] = readout_experiment(spec, g).deviation_norm
    ratio = norms[0.1] / norms[0.05]
    dt = time.perf_counter() - t0
    report(4, abs(ratio / 4 - 1) <= 0.15 and dt < 300, f"norm ratio {ratio:.4f} (4 +- 15%)", dt)


def test_criterion_5_flat_bath_formula():
    g = make_grid(5.0, "bosonic", 256)
    got = detector_with_bath(FLAT, g, "paper_literal").to_complex()
    z = 1j * g.frequencies
    closed = 2.0 / (z**2 - 1.0 + 0.2j)
    worst = float(np.max(np.abs(got - closed) / np.abs(closed)))
    n0 = got[g.position(0)]
    ok = worst <= 4 * np.finfo(float).eps and np.isclose(n0, -1.9230769230769231 - 0.38461538461538464j, rtol=1e-15)
    report(5, ok, f"max rel {worst:.1e} vs closed form, n=0 value {n0:.15f}")


def test_criterion_6_continuation():
    t0 = time.perf_counter()
    g = make_grid(5.0, "bosonic", 40)
    w = np.linspace(0.5, 1.5, 201)
    eta = 1e-3
    pade = pade_continue(pade_fit(detector_with_bath(FLAT, g, "symmetric"), 6), w, eta).values
    exact = continue_rational(flat_bath_form(FLAT), w, eta)
    dev = float(np.max(np.abs(pade - exact) / np.abs(exact)))
    ds = oscillator_readout(FLAT, OscillatorSpec(0.8), 0.1, g, mode="symmetric", dps=40)
    poles = pade_poles(pade_fit(ds.extracted.as_double(), 6))
    pole = poles[poles.real > 0][np.argmin(np.abs(poles[poles.real > 0].imag))]
    miss = abs(pole.real - 0.8) / 0.8
    dt = time.perf_counter() - t0
    report(6, dev <= 1e-4 and miss <= 0.01 and dt < 10,
           f"D_RB retarded max rel {dev:.2e} (<= 1e-4), pole {pole.real:.6f} miss {miss:.1e} (<= 1%)", dt)


def test_criterion_7_transform_suite():
    beta, N, M = 5.0, 256, 2048
    g = make_grid(beta, "bosonic", N)
    # tau -> w_n -> tau for the bare cavity at interior times; the trapezoid offset -h^2 w_d / 6 is the same at
    # every frequency, cancels inside (0, beta) and piles up to ~2e-4 at the endpoints themselves
    ts = sample_tau(lambda t: cavity_bare_tau(1.0, beta, t), beta, n_intervals=M)
    taus = np.linspace(0, beta, 21)[1:-1]
    back = freq_to_tau(tau_to_freq(ts, g), taus, tail_correction=True).values
    ref = np.array([cavity_bare_tau(1.0, beta, t) for t in taus])
    roundtrip = float(np.max(np.abs(back - ref) / np.abs(ref)))
    # bosonic periodicity and fermionic antiperiodicity
    inner = np.linspace(0.25, 4.75, 10)
    D = cavity_bare(1.0, g)
    pos = freq_to_tau(D, inner, tail_correction=True).values
    neg = freq_to_tau(D, inner - beta, tail_correction=True, kms_extension=True).values
    ends = freq_to_tau(D, [0.0, beta], tail_correction=True).values
    kms_b = max(float(np.max(np.abs(pos - neg) / np.abs(pos))), abs(ends[0] - ends[1]) / abs(ends[0]))
    eps = 0.4
    G = free_fermion_propagator(eps, make_grid(beta, "fermionic", N))
    gp = freq_to_tau(G, inner, tail_correction=True).values
    gn = freq_to_tau(G, inner - beta, tail_correction=True, kms_extension=True).values
    exact = -(1 - fermi(eps, beta)) * np.exp(-eps * inner)
    kms_f = max(float(np.max(np.abs(gp + gn) / np.abs(gp))), float(np.max(np.abs(gp - exact) / np.abs(exact))))
    # exact Hermitian symmetry of every symmetric-mode output
    ds = oscillator_readout(FLAT, OscillatorSpec(0.8), 0.1, g, mode="symmetric")
    herm = max(s.conj_symmetry_defect() for _, s in ds.items())
    ok = roundtrip <= 1e-6 and kms_b <= 1e-6 and kms_f <= 1e-6 and herm == 0.0
    report(7, ok, f"roundtrip {roundtrip:.2e}, KMS bosonic {kms_b:.2e}, fermionic {kms_f:.2e} (<= 1e-6), "
                  f"Hermitian defect {herm:g}")


def test_criterion_8_bubble_checks():
    lat = LatticeSpec(4)
    g = make_grid(5.0, "bosonic", 256)
    q0 = density_bubble(lat, 0, g).to_complex()
    zero_ok = bool(np.all(q0[g.indices != 0] == 0))
    outer = np.abs(g.indices) >= g.N // 2
    w = g.frequencies[outer]
    decay_ok = True
    for q in range(1, 4):
        K = bubble_decay_constant(lat, q, 5.0)
        decay_ok &= bool(np.all(np.abs(density_bubble(lat, q, g).to_complex()[outer]) <= K / w**2))
    val = density_bubble(lat, 2, g).at(1)
    ref = bubble_internal_sum(tight_binding(4), 2, 1, 5.0)
    brute = abs(val - ref) / abs(ref)
    report(8, zero_ok and decay_ok and brute <= 1e-6,
           f"q=0 zero {zero_ok}, decay bound {decay_ok}, brute-force rel {brute:.1e} (<= 1e-6)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
