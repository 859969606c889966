import cmath
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_model
from hybridyn.dynamics import (CANDIDATE_DT, CONVENTIONS, GridGenerator, MeasurementModel, PointsDerivative,
                               branch_points, build_candidate, decoherence_report, earliest_separation,
                               evolve_grid, evolve_points, hamilton_trajectory, hybrid_generator,
                               initial_grid_state, initial_points_state, phase_ode, residual_norm)
from hybridyn.errors import BoundaryMass, CflViolation, NumericalBlowup, SeparationFailure
from hybridyn.hybrid import HybridState, hybrid_trace, quantum_marginal
from hybridyn.phase_space import (ClassicalKernel, CrossDyad, PhaseSpaceGrid, PointState, classical_mean,
                                  poisson_bracket, smooth_delta)
from hybridyn.polynomial import Polynomial
from hybridyn.quantum import MeasuredBasisModel

GRID = PhaseSpaceGrid(-6, 6, 64, -6, 6, 64)
FREE = [0, 0, 0, 0, 0, 0.5]


# --- model ---------------------------------------------------------------------

def test_degenerate_coupling_warns():
    with pytest.warns(UserWarning, match="degenerate"):
        MeasurementModel(MeasuredBasisModel([0, 0], [1, 1], [1, 0]), Polynomial(), Polynomial())


def test_model_rejects_nonpositive_hbar():
    with pytest.raises(ValueError):
        make_model(hbar=0.0)


# --- trajectories ------------------------------------------------------------------

def test_harmonic_quarter_period():
    tr = hamilton_trajectory(make_model(), 0.0, 1.0, 0.0, 1e-3, math.pi / 2)
    q, p = tr.at_final()
    assert abs(q) <= 1e-6 and abs(p + 1) <= 1e-6
    assert tr.t[-1] == pytest.approx(math.pi / 2)
    assert np.all(np.diff(tr.t) > 0)


def test_constant_force():
    m = make_model(H=FREE)
    q, p = hamilton_trajectory(m, 1.0, 0.0, 0.0, 1e-2, 1.0).at_final()
    assert abs(q + 0.5) <= 1e-9 and abs(p + 1) <= 1e-9


def test_free_fixed_point():
    q, p = hamilton_trajectory(make_model(H=FREE), 0.0, 0.0, 0.0, 1e-2, 1.0).at_final()
    assert (q, p) == (0.0, 0.0)


def test_golden_branches_closed_form(golden):
    t = np.linspace(0, 1, 501)
    tr = hamilton_trajectory(golden, 1.0, 1.0, 0.0, 2e-3, 1.0)
    np.testing.assert_allclose(tr.q, 2 * np.cos(t) - 1, atol=1e-6)
    np.testing.assert_allclose(tr.p, -2 * np.sin(t), atol=1e-6)
    tr = hamilton_trajectory(golden, -1.0, 1.0, 0.0, 2e-3, 1.0)
    np.testing.assert_allclose(tr.q, 1, atol=1e-12)
    mid = hamilton_trajectory(golden, 0.0, 1.0, 0.0, 2e-3, 1.0)
    np.testing.assert_allclose(mid.q, np.cos(t), atol=1e-6)


@pytest.mark.parametrize("u", [-1.0, 0.0, 1.0])
def test_energy_drift_bounded(golden, u):
    assert hamilton_trajectory(golden, u, 1.0, 0.0, CANDIDATE_DT, 1.0).energy_drift(golden) <= 1e-6


def test_energy_error_is_second_order(golden):
    errs = [hamilton_trajectory(golden, 1.0, 1.0, 0.0, dt, 1.0).energy_drift(golden) for dt in (2e-3, 1e-3)]
    assert errs[1] == pytest.approx(errs[0] / 4, rel=0.05)


def test_non_separable_hamiltonian():
    # H = (q^2 + p^2)/2 + 0.1 q^2 p^2 needs the implicit stages
    m = make_model(H=[0, 0, 0, 0.5, 0, 0.5, 0, 0, 0, 0, 0, 0, 0.1], V=[0, 0, 1])
    tr = hamilton_trajectory(m, 0.3, 1.0, 0.5, 1e-3, 3.0)
    assert tr.energy_drift(m) <= 1e-6
    ref = hamilton_trajectory(m, 0.3, 1.0, 0.5, 5e-4, 3.0)
    assert np.hypot(*np.subtract(tr.at_final(), ref.at_final())) <= 1e-5


def test_trajectory_blowup():
    m = make_model(H=[0, 0, 0, 0, 0, 0.5, 0, 0, 0, 0, -1.0])  # p^2/2 - q^4 runs away
    with pytest.raises(NumericalBlowup):
        hamilton_trajectory(m, 0.0, 2.0, 0.0, 0.05, 10.0)


def test_trajectory_rejects_bad_step(golden):
    with pytest.raises(ValueError):
        hamilton_trajectory(golden, 0.0, 0.0, 0.0, 0.0, 1.0)


# --- phase ODE -----------------------------------------------------------------

def test_phase_diagonal_constant(golden):
    tr = hamilton_trajectory(golden, 1.0, 1.0, 0.0, 1e-2, 1.0)
    ph = phase_ode(golden, 0, 0, tr)
    np.testing.assert_allclose(ph.c, 0.5, atol=1e-15)


def test_phase_energy_splitting():
    m = make_model(h=(2.0, 0.5), v=(0.3, 0.3), hbar=0.7)
    tr = hamilton_trajectory(m, 0.3, 1.0, 0.0, 1e-2, 1.0)
    ph = phase_ode(m, 0, 1, tr, c0=0.5)
    np.testing.assert_allclose(ph.c, 0.5 * np.exp(1.5 * ph.t / (1j * 0.7)), atol=1e-10)


def test_phase_stationary_free_particle():
    m = make_model(H=FREE)
    tr = hamilton_trajectory(m, 0.0, 1.0, 0.0, 1e-2, 1.0)
    ph = phase_ode(m, 0, 1, tr)
    np.testing.assert_allclose(ph.c, 0.5 * np.exp(2 * ph.t / 1j), atol=1e-10)


def test_phase_needs_even_steps(golden):
    tr = hamilton_trajectory(golden, 0.0, 1.0, 0.0, 0.1, 0.3)
    with pytest.raises(ValueError):
        phase_ode(golden, 0, 1, tr)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.2, 3))
def test_phase_modulus_conserved(h1, v1, v2, T):
    m = make_model(h=(h1, 0.0), v=(v1, v2))
    tr = hamilton_trajectory(m, 0.5 * (v1 + v2), 1.0, 0.0, 2e-3, T)
    if (len(tr.t) - 1) % 2:
        tr = hamilton_trajectory(m, 0.5 * (v1 + v2), 1.0, 0.0, T / len(tr.t), T)
    ph = phase_ode(m, 0, 1, tr)
    assert np.max(np.abs(np.abs(ph.c) - 0.5)) <= 1e-8


# --- grid generator --------------------------------------------------------------

def gaussian_blocks(m, grid=GRID, sigma=0.6, q0=1.0, p0=0.0):
    g = smooth_delta(q0, p0, sigma, sigma, grid).values
    c = m.c0
    return np.outer(c, c.conj())[:, :, None, None] * g


@pytest.mark.parametrize("derivative", ["fd4", "spectral"])
def test_generator_diagonal_block_is_liouville(golden, derivative):
    rho = gaussian_blocks(golden)
    gen = GridGenerator(golden, GRID, derivative=derivative)
    rate = gen(rho)
    expect = [poisson_bracket(ClassicalKernel.from_function(GRID, golden.effective_hamiltonian(vi)),
                              ClassicalKernel(GRID, rho[i, i], "coherence")).values
              for i, vi in enumerate(golden.v)]
    scale = max(np.max(np.abs(e)) for e in expect)
    tol = 1e-12 if derivative == "fd4" else 5e-3  # spectral vs fd4 truncation
    for i in range(2):
        assert np.max(np.abs(rate[i, i] - expect[i])) <= tol * scale


def test_generator_free_statics():
    m = make_model(h=(1, 1), v=(0.5, 0.5), H=[], V=[])
    s = HybridState.from_grid(gaussian_blocks(m), GRID)
    assert np.all(hybrid_generator(m, s).blocks == 0)


@pytest.mark.parametrize("derivative", ["fd4", "spectral"])
def test_generator_term_symmetry(derivative):
    m = make_model(h=(0.3, -1.2, 0.4), v=(1.0, -0.5, 0.2), c0=np.array([0.6, 0.48, 0.64j]))
    rho = gaussian_blocks(m, sigma=0.5)
    terms = GridGenerator(m, GRID, derivative=derivative).terms(rho)
    for name, t in terms.items():
        scale = max(np.max(np.abs(t)), 1e-300)
        assert np.max(np.abs(t - np.conj(np.swapaxes(t, 0, 1)))) <= 1e-12 * scale, name


@pytest.mark.parametrize("derivative", ["fd4", "spectral"])
def test_generator_conserves_diagonal_mass(golden, derivative):
    rate = GridGenerator(golden, GRID, derivative=derivative)(gaussian_blocks(golden))
    for i in range(2):
        assert abs(np.sum(rate[i, i]) * GRID.cell_area) <= 1e-9


def test_generator_boundary_guard(golden):
    Q, P = GRID.mesh()
    g = np.exp(-((Q - 5.0) ** 2 + P ** 2) / (2 * 0.6 ** 2))
    rho = np.outer(golden.c0, golden.c0.conj())[:, :, None, None] * g
    with pytest.raises(BoundaryMass):
        GridGenerator(golden, GRID)(rho)


def test_threads_do_not_change_the_rate():
    m = make_model(h=(0.3, -1.2, 0.4), v=(1.0, -0.5, 0.2), c0=np.array([0.6, 0.48, 0.64j]))
    rho = gaussian_blocks(m, sigma=0.5)
    assert np.array_equal(GridGenerator(m, GRID, threads=1)(rho), GridGenerator(m, GRID, threads=3)(rho))


# --- points generator ------------------------------------------------------------

def test_points_generator_cross_dyad():
    m = make_model(h=(1.5, 0.25), v=(1.0, -1.0), hbar=0.5)
    w = 0.3 + 0.4j
    s = HybridState.from_points(2, {(0, 1): (CrossDyad(1.0, 0.2, -0.5, 0.7, w),)})
    d = hybrid_generator(m, s)
    assert isinstance(d, PointsDerivative)
    r = d.blocks[(0, 1)][0]
    assert r.ket_H == r.ket_V == r.bra_H == r.bra_V == (0.0, 0.0)
    assert r.phase_h == pytest.approx(1.25 / (0.5j) * w)
    assert r.phase_v == pytest.approx(2.0 / (0.5j) * 0.5 * (1.0 - 0.5) * w)


def test_points_generator_delta_rides_the_flow(golden):
    s = HybridState.from_points(2, {(0, 0): (PointState(0.5, -0.3, 0.5),), (0, 1): (PointState(0.5, -0.3, 0.5),)})
    d = hybrid_generator(golden, s)
    r00 = d.blocks[(0, 0)][0]
    np.testing.assert_allclose(r00.ket_velocity, [-0.3, -(0.5 + 1.0)])
    assert r00.amplitude_rate == 0
    r01 = d.blocks[(0, 1)][0]
    np.testing.assert_allclose(r01.ket_velocity, [-0.3, -0.5])
    assert r01.phase_v == pytest.approx(2 / 1j * 0.5 * 0.5)


# --- grid evolution ----------------------------------------------------------------

def test_single_branch_half_period():
    m = make_model(h=(0.0,), v=(0.0,), c0=[1.0])
    s0 = initial_grid_state(m, GRID, 0.5, 0.5)
    states = evolve_grid(m, s0, 5e-3, math.pi, every=1000)
    rho = ClassicalKernel(GRID, states[-1].blocks[0, 0].real, "observable")
    q = ClassicalKernel.from_function(GRID, lambda q, p: q)
    assert classical_mean(q, rho) == pytest.approx(-1.0, abs=1e-2)
    assert states[-1].t == pytest.approx(math.pi)


def test_uncoupled_coherence_mass_constant():
    m = make_model(v=(0.0, 0.0), h=(1.0, 0.0))
    states = evolve_grid(m, initial_grid_state(m, GRID), 4e-3, 1.0, every=25)
    mags = [abs(quantum_marginal(s).matrix[0, 1]) for s in states]
    assert max(mags) - min(mags) <= 1e-6


@pytest.fixture(scope="module")
def golden_run():
    m = make_model()
    return m, evolve_grid(m, initial_grid_state(m, GRID), 2e-3, 1.0, every=50)


def test_golden_grid_means_track_branches(golden_run):
    m, states = golden_run
    s = states[-1]
    q = ClassicalKernel.from_function(GRID, lambda q, p: q)
    p = ClassicalKernel.from_function(GRID, lambda q, p: p)
    for i, u in enumerate(m.v):
        tr = hamilton_trajectory(m, u, m.q0, m.p0, 2e-3, 1.0)
        rho = ClassicalKernel(GRID, s.blocks[i, i].real, "observable")
        assert abs(classical_mean(q, rho) - tr.q[-1]) <= 2e-2
        assert abs(classical_mean(p, rho) - tr.p[-1]) <= 2e-2


def test_golden_grid_populations_and_trace(golden_run):
    _, states = golden_run
    for s in states:
        np.testing.assert_allclose(quantum_marginal(s).populations, [0.5, 0.5], atol=1e-6)
        assert abs(hybrid_trace(s) - 1) <= 1e-7
    assert [round(s.t, 12) for s in states] == [round(0.1 * k, 12) for k in range(11)]


def test_cfl_guard(golden):
    with pytest.raises(CflViolation):
        evolve_grid(golden, initial_grid_state(golden, GRID), 0.05, 0.1)


def test_boundary_reached():
    m = make_model(h=(0.0,), v=(0.0,), c0=[1.0], H=FREE, q0=2.0, p0=3.0)
    with pytest.raises(BoundaryMass):
        evolve_grid(m, initial_grid_state(m, GRID, 0.5, 0.5), 5e-3, 2.0)


def test_fd4_and_spectral_agree_early(golden):
    s0 = initial_grid_state(golden, GRID)
    a = evolve_grid(golden, s0, 2e-3, 0.2, every=100, derivative="fd4")[-1].blocks
    b = evolve_grid(golden, s0, 2e-3, 0.2, every=100, derivative="spectral")[-1].blocks
    assert np.max(np.abs(a - b)) <= 5e-3 * np.max(np.abs(b))


# --- candidates ------------------------------------------------------------------

def atoms_of(s):
    return {k: [(a.ket, a.bra, complex(a.amplitude)) for a in v] for k, v in s.blocks.items()}


def test_candidates_at_t0(golden):
    init = atoms_of(initial_points_state(golden))
    assert atoms_of(build_candidate(golden, 7, 0.0)) == init
    assert atoms_of(build_candidate(golden, 10, 0.0)) == init
    c9 = build_candidate(golden, 9, 0.0)
    assert set(c9.blocks) == {(0, 0), (1, 1)}
    for i in range(2):
        (a,) = c9.atoms(i, i)
        assert isinstance(a, PointState) and a.ket == (1.0, 0.0) and a.amplitude == pytest.approx(0.5, abs=1e-15)


def test_candidate_positions(golden):
    c7 = build_candidate(golden, 7, 1.0)
    (a,) = c7.atoms(0, 1)
    assert isinstance(a, CrossDyad)
    assert a.ket == pytest.approx((2 * math.cos(1) - 1, -2 * math.sin(1)), abs=1e-6)
    assert a.bra == pytest.approx((1.0, 0.0), abs=1e-12)
    (b,) = build_candidate(golden, 10, 1.0).atoms(0, 1)
    assert b.ket == pytest.approx((math.cos(1), -math.sin(1)), abs=1e-6)
    # c_12(t) = c_12 exp(2 sin t / i) along the midpoint q_12 = cos t
    assert complex(b.amplitude) == pytest.approx(0.5 * cmath.exp(2 * math.sin(1) / 1j), abs=1e-9)


def test_candidate_rejects_bad_input(golden):
    with pytest.raises(ValueError):
        build_candidate(golden, 8, 1.0)
    with pytest.raises(ValueError):
        build_candidate(golden, 9, -1.0)


def test_characteristics_reproduce_candidate_10(golden):
    s = evolve_points(golden, initial_points_state(golden), 2.5e-4, 1.0, every=4000)[-1]
    c10 = build_candidate(golden, 10, 1.0)
    for key in c10.blocks:
        (a,), (b,) = s.atoms(*key), c10.atoms(*key)
        assert a.ket == pytest.approx(b.ket, abs=1e-12)
        assert complex(a.amplitude) == pytest.approx(complex(b.amplitude), abs=1e-12)


# --- residuals ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def residuals():
    m = make_model()
    return {w: residual_norm(m, w, 1.0, GRID) for w in (7, 9, 10)}


def test_residual_9_and_10_solve(residuals):
    for w in (9, 10):
        assert residuals[w].total <= 1e-6
        assert residuals[w].fd_stable


def test_residual_7_fails_on_transport(residuals):
    r = residuals[7]
    assert r.total >= 1e-4
    # block (0, 1) has weight |c_12| = 0.5 in a state of norm 1
    assert r.blocks[(0, 1)] >= 0.1 * 0.5
    assert r.transport > 1e3 * r.amplitude
    assert r.fd_stable


def test_residual_terms_reported(residuals):
    terms = residuals[7].terms
    assert set(terms) == {"lhs", "phase_h", "bracket_H", "phase_v", "bracket_V"}
    assert terms["lhs"] > 0 and terms["phase_v"] > 0


def test_residual_7_insensitive_to_prefactor_convention():
    # asymmetric couplings make the two conventions give different prefactors
    m = make_model(v=(2.0, -0.5), h=(0.3, -0.2))
    reps = [residual_norm(m, 7, 1.0, GRID, convention=c) for c in CONVENTIONS]
    c_end, c_br = (build_candidate(m, 7, 1.0, convention=c).atoms(0, 1)[0].amplitude for c in CONVENTIONS)
    assert abs(c_end - c_br) > 1e-3
    assert all(r.total >= 1e-4 for r in reps)
    assert abs(reps[0].total - reps[1].total) <= 0.1 * reps[0].total


def test_residual_needs_separated_bins(golden):
    with pytest.raises(SeparationFailure):
        residual_norm(golden, 9, 1e-3, GRID)
    t = earliest_separation(golden, GRID, 2.5e-4, 1.0)
    assert 0 < t < 1
    residual_norm(golden, 9, t + 0.01, GRID)


def test_branch_points(golden):
    pts = branch_points(golden, 1.0)
    assert set(pts) == {(0, 0), (1, 1), (0, 1)}
    assert pts[(1, 1)] == pytest.approx((1.0, 0.0), abs=1e-12)


# --- decoherence report ---------------------------------------------------------------

def test_report_candidate_9_series(golden):
    states = [build_candidate(golden, 9, t) for t in (0.0, 0.5, 1.0)]
    rows = decoherence_report(states, GRID)
    for r in rows:
        np.testing.assert_allclose(r.populations, [0.5, 0.5])
        assert r.coherences[(0, 1)] == 0
        assert r.linear_entropy == pytest.approx(0.5, abs=1e-12)


def test_report_uncoupled_grid_entropy_constant():
    m = make_model(v=(0.0, 0.0))
    rows = decoherence_report(evolve_grid(m, initial_grid_state(m, GRID), 4e-3, 1.0, every=50))
    s = [r.linear_entropy for r in rows]
    assert max(s) - min(s) <= 1e-6


def test_report_candidate_10_goes_negative(golden):
    t_sep = earliest_separation(golden, GRID, 2.5e-4, 1.0)
    rows = decoherence_report([build_candidate(golden, 10, t) for t in (0.0, 0.5 * t_sep, t_sep, 1.0)], GRID)
    eigs = [r.min_eig for r in rows]
    assert eigs[0] == 0.0
    assert eigs[-1] == pytest.approx(-0.5, abs=1e-10)
    assert eigs[2] == pytest.approx(-0.5, abs=1e-10)
