"""Hybrid measurement dynamics.

The generator acts on block (i, j) of a hybrid state as

    d rho_ij/dt = (h_i - h_j)/(i hbar) rho_ij                 (phase, H_qm)
                + {H_cm, rho_ij}                                (transport, H_cm)
                + (v_i - v_j)/(i hbar) (V_cm rho_ij)_sym        (phase, coupling)
                + (v_i + v_j)/2 {V_cm, rho_ij}                  (transport, coupling)

On grid kernels the brackets are finite-difference Poisson brackets and the
symmetrized product is pointwise.  On point atoms the brackets move a delta
state along the Hamiltonian flow of H_cm + (v_i + v_j)/2 V_cm, while a cross
dyad (distinct ket and bra) is not a function of q_cm, p_cm and receives no
bracket contribution at all; only its phase evolves.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CflViolation, InvariantViolation, NumericalBlowup, SeparationFailure
from .hybrid import (HybridState, QuantumMarginal, assemble, hermiticity_residual, hybrid_trace,
                     min_eigenvalue, purity, quantum_marginal)
from .phase_space import (BOUNDARY_TOL, Annihilated, ClassicalKernel, CrossDyad, PhaseSpaceGrid,
                          PointState, check_boundary, diff, dyad, operator_derivative, smooth_delta)
from .polynomial import Polynomial
from .quantum import MeasuredBasisModel

CANDIDATE_DT = 2.5e-4
FD_STEP = 1e-4
RESIDUAL_TOL = 1e-6
BLOWUP_FACTOR = 1e6
MASS_TOL_PER_STEP = 1e-7
HERM_TOL = 1e-10
_SV_MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Quantum system, classical pointer and their coupling.

    Full Hamiltonian: H_qm (x) I + I (x) H_cm + V_qm (x) V_cm, with the
    pointer starting sharply at ``(q0, p0)`` at time ``t0``.
    """

    basis: MeasuredBasisModel
    H_cm: Polynomial
    V_cm: Polynomial
    hbar: float = 1.0
    t0: float = 0.0
    q0: float = 0.0
    p0: float = 0.0

    def __post_init__(self):
        if self.hbar <= 0:
            raise ValueError("hbar must be positive")
        _Flow(self.H_cm, self.V_cm)  # validates degrees via Polynomial
        if self.basis.degenerate_pairs():
            warnings.warn(
                f"degenerate coupling eigenvalues for pairs {self.basis.degenerate_pairs()}: "
                "their pointer trajectories coincide and never decohere", stacklevel=2)

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def h(self) -> np.ndarray:
        return self.basis.h

    @property
    def v(self) -> np.ndarray:
        return self.basis.v

    @property
    def c0(self) -> np.ndarray:
        return self.basis.c0

    def pair_coupling(self, i: int, j: int) -> float:
        return 0.5 * (self.v[i] + self.v[j])

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.dim) for j in range(i + 1, self.dim)]

    def effective_hamiltonian(self, u: float) -> Polynomial:
        return self.H_cm + self.V_cm.scaled(u)


def _evaluator(poly: Polynomial):
    terms = sorted(poly.terms.items())
    if not terms:
        return lambda q, p: np.zeros(np.broadcast(q, p).shape)
    amax = max(a for (a, _), _ in terms)
    bmax = max(b for (_, b), _ in terms)

    def f(q, p):
        qs = [1.0, q]
        for _ in range(2, amax + 1):
            qs.append(qs[-1] * q)
        ps = [1.0, p]
        for _ in range(2, bmax + 1):
            ps.append(ps[-1] * p)
        out = 0.0
        for (a, b), c in terms:
            out = out + c * qs[a] * ps[b]
        return out + np.zeros(np.broadcast(q, p).shape)

    return f


class _Flow:
    """Hamilton vector field of H_cm + u V_cm, vectorized over u."""

    def __init__(self, H: Polynomial, V: Polynomial):
        self._hq, self._hp = _evaluator(H.d_q()), _evaluator(H.d_p())
        self._vq, self._vp = _evaluator(V.d_q()), _evaluator(V.d_p())
        self._v = _evaluator(V)
        self.dq_depends_on_p = any(b > 0 for (_, b) in (H.d_q() + V.d_q()).terms)
        self.dp_depends_on_q = any(a > 0 for (a, _) in (H.d_p() + V.d_p()).terms)

    def dH_dq(self, q, p, u):
        return self._hq(q, p) + u * self._vq(q, p)

    def dH_dp(self, q, p, u):
        return self._hp(q, p) + u * self._vp(q, p)

    def coupling(self, q, p):
        return self._v(q, p)

    def velocity(self, q, p, u):
        return self.dH_dp(q, p, u), -self.dH_dq(q, p, u)


def _fixed_point(f, x0):
    x = x0
    for _ in range(_SV_MAX_ITER):
        nxt = f(x)
        if np.all(np.abs(nxt - x) <= 1e-15 * (1.0 + np.abs(nxt))):
            return nxt
        x = nxt
    raise NumericalBlowup("implicit leapfrog stage did not converge")


def _leapfrog(flow: _Flow, q, p, u, h, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` Stormer-Verlet steps of size ``h`` (arrays broadcast), all samples returned.

    Explicit kick-drift-kick when H_cm + u V_cm is separable; otherwise the
    implicit stages are solved by fixed-point iteration.
    """
    q, p, u, h = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (q, p, u, h)))
    qs = np.empty((n + 1,) + q.shape)
    ps = np.empty((n + 1,) + q.shape)
    qs[0], ps[0] = q, p
    limit = BLOWUP_FACTOR * (1.0 + np.max(np.abs(np.concatenate([q.ravel(), p.ravel()])), initial=0.0))
    half = 0.5 * h
    for k in range(n):
        if flow.dq_depends_on_p:
            ph = _fixed_point(lambda x: p - half * flow.dH_dq(q, x, u), p)
        else:
            ph = p - half * flow.dH_dq(q, p, u)
        g0 = flow.dH_dp(q, ph, u)
        if flow.dp_depends_on_q:
            q = _fixed_point(lambda x: q + half * (g0 + flow.dH_dp(x, ph, u)), q + h * g0)
        else:
            q = q + h * g0
        p = ph - half * flow.dH_dq(q, ph, u)
        qs[k + 1], ps[k + 1] = q, p
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))) or \
                np.max(np.abs(q)) > limit or np.max(np.abs(p)) > limit:
            raise NumericalBlowup(f"trajectory left |x| < {limit:.3g} at step {k + 1}")
    return qs, ps


def _steps(span: float, dt: float) -> int:
    return max(1, math.ceil(span / dt - 1e-9))


@dataclass(frozen=True, eq=False)
class BranchTrajectory:
    """Samples of a pointer trajectory under H_cm + u V_cm."""

    label: tuple
    u: float
    t: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def at_final(self) -> tuple[float, float]:
        return float(self.q[-1]), float(self.p[-1])

    def energy_drift(self, model: MeasurementModel) -> float:
        e = model.effective_hamiltonian(self.u)(self.q, self.p)
        return float(np.max(np.abs(e - e[0])))


def hamilton_trajectory(m: MeasurementModel, u: float, q0: float, p0: float, dt: float, T: float,
                        label: tuple = ()) -> BranchTrajectory:
    """Leapfrog solution of dq/dt = dH/dp, dp/dt = -dH/dq with H = H_cm + u V_cm.

    The step is shrunk to ``T / ceil(T / dt)`` so the last sample lands on
    ``t0 + T``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = _steps(T, dt)
    h = T / n
    qs, ps = _leapfrog(_Flow(m.H_cm, m.V_cm), q0, p0, u, h, n)
    t = m.t0 + h * np.arange(n + 1)
    return BranchTrajectory(label, float(u), t, qs, ps)


@dataclass(frozen=True, eq=False)
class CoherencePhase:
    pair: tuple
    t: np.ndarray
    c: np.ndarray


def _rk4_pairs(rate: np.ndarray, c0, h) -> np.ndarray:
    """RK4 for dc/dt = rate(t) c with rate sampled at half steps.

    ``rate`` has shape ``(2n + 1, ...)`` at times t0 + k h/2; the result holds
    c at the ``n + 1`` full steps.
    """
    n = (rate.shape[0] - 1) // 2
    c = np.empty((n + 1,) + np.broadcast(rate[0], c0).shape, dtype=complex)
    c[0] = c0
    for k in range(n):
        a0, am, a1 = rate[2 * k], rate[2 * k + 1], rate[2 * k + 2]
        k1 = a0 * c[k]
        k2 = am * (c[k] + 0.5 * h * k1)
        k3 = am * (c[k] + 0.5 * h * k2)
        k4 = a1 * (c[k] + h * k3)
        c[k + 1] = c[k] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return c


def phase_ode(m: MeasurementModel, i: int, j: int, trajectory, c0: complex | None = None) -> CoherencePhase:
    """Phase of the coefficient c_ij along a pointer trajectory.

    dc_ij/dt = [(h_i - h_j) + (v_i - v_j) V_cm(t)] c_ij / (i hbar)

    ``trajectory`` is either one :class:`BranchTrajectory` (the pair midpoint,
    V_cm evaluated on it) or a ``(ket, bra)`` pair of trajectories (V_cm
    averaged over both ends).  The trajectory must have an even number of
    steps: RK4 takes its midpoint stage from the odd samples, so the result
    is reported on every other sample.
    """
    flow = _Flow(m.H_cm, m.V_cm)
    if isinstance(trajectory, BranchTrajectory):
        t = trajectory.t
        veff = flow.coupling(trajectory.q, trajectory.p)
    else:
        ket, bra = trajectory
        t = ket.t
        veff = 0.5 * (flow.coupling(ket.q, ket.p) + flow.coupling(bra.q, bra.p))
    if (len(t) - 1) % 2:
        raise ValueError("phase integration needs an even number of trajectory steps")
    if c0 is None:
        c0 = m.c0[i] * np.conj(m.c0[j])
    rate = ((m.h[i] - m.h[j]) + (m.v[i] - m.v[j]) * veff) / (1j * m.hbar)
    h = 2.0 * (t[1] - t[0]) if len(t) > 1 else 0.0
    c = _rk4_pairs(rate, complex(c0), h)
    return CoherencePhase((i, j), t[::2], c)


# ---------------------------------------------------------------------------
# grid generator and evolver


def spectral_diff(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """FFT derivative along ``axis``; valid only for fields that vanish at the edges."""
    n = values.shape[axis]
    k = 2j * np.pi * np.fft.fftfreq(n, d=h)
    shape = [1] * values.ndim
    shape[axis] = n
    return np.fft.ifft(np.fft.fft(values, axis=axis) * k.reshape(shape), axis=axis)


DERIVATIVES = ("fd4", "spectral")
GRID_DERIVATIVE = "spectral"


class GridGenerator:
    """Right-hand side of the hybrid equation on grid kernels.

    ``derivative`` selects how the state blocks are differentiated:
    ``"fd4"`` (fourth-order stencils) or ``"spectral"`` (FFT, relying on the
    boundary guard to keep the state away from the wrap-around).  H_cm and
    V_cm are always differentiated with the stencils, which are exact on
    their polynomial degrees.
    """

    def __init__(self, m: MeasurementModel, grid: PhaseSpaceGrid,
                 boundary_tol: float | None = BOUNDARY_TOL, threads: int = 1,
                 derivative: str = GRID_DERIVATIVE):
        if derivative not in DERIVATIVES:
            raise ValueError(f"derivative must be one of {DERIVATIVES}")
        self.model = m
        self.grid = grid
        self.boundary_tol = boundary_tol
        self.threads = max(1, int(threads))
        self.derivative = derivative
        H = ClassicalKernel.from_function(grid, m.H_cm)
        V = ClassicalKernel.from_function(grid, m.V_cm)
        self.V = V.values.real
        self.Hq, self.Hp = diff(H.values.real, grid.dq, 0), diff(H.values.real, grid.dp, 1)
        self.Vq, self.Vp = diff(self.V, grid.dq, 0), diff(self.V, grid.dp, 1)
        n = m.dim
        self.dh = (m.h[:, None] - m.h[None, :]).reshape(n, n, 1, 1)
        self.dv = (m.v[:, None] - m.v[None, :]).reshape(n, n, 1, 1)
        self.u = (0.5 * (m.v[:, None] + m.v[None, :])).reshape(n, n, 1, 1)

    def max_speeds(self) -> tuple[float, float]:
        us = np.unique(self.u)
        sq = max(np.max(np.abs(self.Hp + u * self.Vp)) for u in us)
        sp = max(np.max(np.abs(self.Hq + u * self.Vq)) for u in us)
        return float(sq), float(sp)

    def stable_dt(self) -> float:
        sq, sp = self.max_speeds()
        lim_q = self.grid.dq / sq if sq > 0 else math.inf
        lim_p = self.grid.dp / sp if sp > 0 else math.inf
        return 0.25 * min(lim_q, lim_p)

    def terms(self, blocks: np.ndarray, rows: slice = slice(None)) -> dict:
        """The four contributions, each shaped like ``blocks``.

        ``blocks`` may be a slice of quantum rows; ``rows`` says which.
        """
        g = self.grid
        d = diff if self.derivative == "fd4" else spectral_diff
        rq = d(blocks, g.dq, 2)
        rp = d(blocks, g.dp, 3)
        return {
            "phase_h": self.dh[rows] / (1j * self.model.hbar) * blocks,
            "bracket_H": self.Hq * rp - self.Hp * rq,
            "phase_v": self.dv[rows] / (1j * self.model.hbar) * (self.V * blocks),
            "bracket_V": self.u[rows] * (self.Vq * rp - self.Vp * rq),
        }

    def _rows(self, blocks: np.ndarray, rows: slice = slice(None)) -> np.ndarray:
        t = self.terms(blocks, rows)
        return t["phase_h"] + t["bracket_H"] + t["phase_v"] + t["bracket_V"]

    def __call__(self, blocks: np.ndarray) -> np.ndarray:
        for i in range(blocks.shape[0]):
            for j in range(blocks.shape[1]):
                check_boundary(blocks[i, j], self.boundary_tol)
        if self.threads == 1 or blocks.shape[0] == 1:
            rate = self._rows(blocks)
        else:
            # rows are independent, so the thread count cannot change the result
            n = blocks.shape[0]
            with ThreadPoolExecutor(max_workers=min(self.threads, n)) as pool:
                parts = list(pool.map(lambda i: self._rows(blocks[i:i + 1], slice(i, i + 1)), range(n)))
            rate = np.concatenate(parts, axis=0)
        if self.derivative == "spectral":
            # FFT rounding is not conjugation-symmetric; restore the block symmetry exactly
            rate = 0.5 * (rate + np.conj(np.swapaxes(rate, 0, 1)))
        return rate


def _threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("HYBRIDYN_THREADS", default)))
    except ValueError:
        return default


def initial_grid_state(m: MeasurementModel, grid: PhaseSpaceGrid,
                       sigma_q: float | None = None, sigma_p: float | None = None) -> HybridState:
    """sum_ij c_i c_j* |psi_i><psi_j| (x) g, with g a Gaussian at (q0, p0)."""
    sigma_q = 3 * grid.dq if sigma_q is None else sigma_q
    sigma_p = 3 * grid.dp if sigma_p is None else sigma_p
    g = smooth_delta(m.q0, m.p0, sigma_q, sigma_p, grid).values
    c = m.c0
    blocks = (c[:, None] * np.conj(c)[None, :])[:, :, None, None] * g[None, None]
    return HybridState.from_grid(blocks, grid, m.t0)


def evolve_grid(m: MeasurementModel, s0: HybridState, dt: float, T: float, every: int = 1,
                boundary_tol: float | None = BOUNDARY_TOL, threads: int | None = None,
                derivative: str = GRID_DERIVATIVE) -> list[HybridState]:
    """RK4 integration of the grid hybrid equation; returns every ``every``-th state.

    Raises CflViolation before stepping, and BoundaryMass, NumericalBlowup or
    InvariantViolation when a per-step check fails.
    """
    if s0.representation != "grid":
        raise ValueError("evolve_grid needs a grid-representation state")
    gen = GridGenerator(m, s0.grid, boundary_tol, _threads_from_env() if threads is None else threads,
                        derivative)
    limit = gen.stable_dt()
    if dt > limit:
        raise CflViolation(f"dt={dt} exceeds the stability bound {limit:.6g}")
    n = _steps(T, dt)
    h = T / n
    rho = np.array(s0.blocks)
    scale0 = np.max(np.abs(rho))
    n_q = m.dim
    mass = np.array([np.sum(rho[i, i]).real for i in range(n_q)]) * s0.grid.cell_area
    out = [s0]
    for k in range(1, n + 1):
        k1 = gen(rho)
        k2 = gen(rho + 0.5 * h * k1)
        k3 = gen(rho + 0.5 * h * k2)
        k4 = gen(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        peak = np.max(np.abs(rho))
        if not np.isfinite(peak) or peak > BLOWUP_FACTOR * scale0:
            raise NumericalBlowup(f"state norm grew beyond {BLOWUP_FACTOR:g}x at step {k}")
        herm = np.max(np.abs(rho - np.conj(np.swapaxes(rho, 0, 1))))
        if herm > HERM_TOL * peak:
            raise InvariantViolation(f"hermiticity residual {herm:.3e} at step {k}")
        new_mass = np.array([np.sum(rho[i, i]).real for i in range(n_q)]) * s0.grid.cell_area
        if np.max(np.abs(new_mass - mass)) > MASS_TOL_PER_STEP:
            raise InvariantViolation(f"diagonal mass changed by {np.max(np.abs(new_mass - mass)):.3e} at step {k}")
        mass = new_mass
        if k % every == 0 or k == n:
            out.append(HybridState.from_grid(rho, s0.grid, m.t0 + k * h))
    return out


# ---------------------------------------------------------------------------
# point atoms: generator, characteristics, candidates


@dataclass(frozen=True)
class AtomRate:
    """Time derivative of one atom a |ket><bra|, split by generator term.

    Velocities are phase-space vectors ``(dq/dt, dp/dt)`` of the ket and bra
    points; amplitude rates are d a/dt.
    """

    phase_h: complex
    phase_v: complex
    ket_H: tuple
    ket_V: tuple
    bra_H: tuple
    bra_V: tuple

    @property
    def amplitude_rate(self) -> complex:
        return self.phase_h + self.phase_v

    @property
    def ket_velocity(self) -> np.ndarray:
        return np.add(self.ket_H, self.ket_V)

    @property
    def bra_velocity(self) -> np.ndarray:
        return np.add(self.bra_H, self.bra_V)


@dataclass(frozen=True, eq=False)
class PointsDerivative:
    dim: int
    blocks: dict  # (i, j) -> tuple[AtomRate, ...]
    t: float = 0.0


def _atom_rate(m: MeasurementModel, flow: _Flow, i: int, j: int, atom) -> AtomRate:
    amp = complex(atom.amplitude)
    zero = (0.0, 0.0)
    vk = flow.coupling(*atom.ket)
    vb = flow.coupling(*atom.bra)
    # symmetrized product acts on the ket from the left, the bra from the right
    vsym = 0.5 * (vk + vb)
    phase_h = (m.h[i] - m.h[j]) / (1j * m.hbar) * amp
    phase_v = (m.v[i] - m.v[j]) / (1j * m.hbar) * vsym * amp
    if isinstance(operator_derivative(atom, "q"), Annihilated):
        return AtomRate(phase_h, phase_v, zero, zero, zero, zero)
    q, p = atom.ket
    vel_H = flow.velocity(q, p, 0.0)
    vel_V = tuple(np.subtract(flow.velocity(q, p, 1.0), vel_H) * m.pair_coupling(i, j))
    vel_H = tuple(float(x) for x in vel_H)
    vel_V = tuple(float(x) for x in vel_V)
    return AtomRate(phase_h, phase_v, vel_H, vel_V, vel_H, vel_V)


def hybrid_generator(m: MeasurementModel, s: HybridState, boundary_tol: float | None = BOUNDARY_TOL,
                     derivative: str = GRID_DERIVATIVE):
    """Time derivative of ``s`` under the measurement dynamics.

    Grid states give a grid :class:`HybridState` of rates; point states give
    a :class:`PointsDerivative` with one :class:`AtomRate` per atom.
    """
    if s.representation == "grid":
        gen = GridGenerator(m, s.grid, boundary_tol, derivative=derivative)
        return HybridState.from_grid(gen(np.asarray(s.blocks)), s.grid, s.t)
    flow = _Flow(m.H_cm, m.V_cm)
    blocks = {(i, j): tuple(_atom_rate(m, flow, i, j, a) for a in atoms)
              for (i, j), atoms in s.blocks.items()}
    return PointsDerivative(s.dim, blocks, s.t)


def initial_points_state(m: MeasurementModel) -> HybridState:
    """sum_ij c_i c_j* |psi_i><psi_j| (x) |q0><q0| (x) |p0><p0|."""
    c = m.c0
    blocks = {(i, j): (PointState(m.q0, m.p0, c[i] * np.conj(c[j])),)
              for i in range(m.dim) for j in range(m.dim)}
    return HybridState.from_points(m.dim, blocks, m.t0)


def evolve_points(m: MeasurementModel, s0: HybridState, dt: float, T: float,
                  every: int = 1) -> list[HybridState]:
    """Characteristics evolution of a point-representation state.

    Delta atoms of block (i, j) ride the flow of H_cm + (v_i + v_j)/2 V_cm;
    cross dyads stay put.  Amplitudes follow the phase terms, integrated by
    RK4 on leapfrog samples taken at half steps.
    """
    if s0.representation != "points":
        raise ValueError("evolve_points needs a point-representation state")
    flow = _Flow(m.H_cm, m.V_cm)
    n = _steps(T, dt)
    h = T / n
    recs = list(s0.records())
    if not recs:
        return [s0]
    i_ = np.array([r[0] for r in recs])
    j_ = np.array([r[1] for r in recs])
    ket = np.array([(r[2], r[3]) for r in recs])
    bra = np.array([(r[4], r[5]) for r in recs])
    amp0 = np.array([r[6] for r in recs])
    moving = np.array([not isinstance(dyad(*r[2:6]), CrossDyad) for r in recs])
    u = 0.5 * (m.v[i_] + m.v[j_])
    qs, ps = _leapfrog(flow, ket[:, 0], ket[:, 1], u, 0.5 * h * moving, 2 * n)
    qb = np.where(moving, qs, bra[:, 0])
    pb = np.where(moving, ps, bra[:, 1])
    vsym = 0.5 * (flow.coupling(qs, ps) + flow.coupling(qb, pb))
    rate = ((m.h[i_] - m.h[j_]) + (m.v[i_] - m.v[j_]) * vsym) / (1j * m.hbar)
    amps = _rk4_pairs(rate, amp0, h)
    out = [s0]
    for k in range(1, n + 1):
        if k % every and k != n:
            continue
        rows = [(i_[a], j_[a], qs[2 * k, a], ps[2 * k, a], qb[2 * k, a], pb[2 * k, a], amps[k, a])
                for a in range(len(recs))]
        blocks: dict = {}
        for i, j, a, b, c, d, w in rows:
            blocks.setdefault((int(i), int(j)), []).append(dyad(a, b, c, d, w))
        out.append(HybridState.from_points(m.dim, blocks, m.t0 + k * h))
    return out


CANDIDATES = (7, 9, 10)
CONVENTIONS = ("endpoint", "branch")


@dataclass(frozen=True, eq=False)
class _Paths:
    """Leapfrog paths at half steps for every branch and pair midpoint.

    Arrays have shape ``(2n + 1, n_ends, n_couplings)``; columns are the
    branches u = v_i first, then pairs (i < j) with u = (v_i + v_j)/2.
    """

    q: np.ndarray
    p: np.ndarray
    V: np.ndarray
    h: np.ndarray  # full step per end time
    columns: dict


def _paths(m: MeasurementModel, ends, dt: float, n: int | None = None) -> _Paths:
    flow = _Flow(m.H_cm, m.V_cm)
    spans = np.asarray(ends, dtype=float) - m.t0
    if np.any(spans < 0):
        raise ValueError("candidate times must not precede t0")
    if n is None:
        n = _steps(float(np.max(spans)), dt) if np.max(spans) > 0 else 1
    columns = {(i, i): i for i in range(m.dim)}
    us = list(m.v)
    for (i, j) in m.pairs():
        columns[(i, j)] = len(us)
        us.append(m.pair_coupling(i, j))
    h = spans / n
    qs, ps = _leapfrog(flow, m.q0, m.p0, np.asarray(us)[None, :], 0.5 * h[:, None], 2 * n)
    return _Paths(qs, ps, flow.coupling(qs, ps), h, columns)


def _candidate_rate(m: MeasurementModel, paths: _Paths, which: int, i: int, j: int,
                    convention: str) -> np.ndarray:
    dh = m.h[i] - m.h[j]
    dv = m.v[i] - m.v[j]
    V = paths.V
    if which == 10:
        f = dv * V[:, :, paths.columns[(min(i, j), max(i, j))]]
    elif convention == "endpoint":
        f = dv * 0.5 * (V[:, :, i] + V[:, :, j])
    elif convention == "branch":
        f = m.v[i] * V[:, :, i] - m.v[j] * V[:, :, j]
    else:
        raise ValueError(f"unknown prefactor convention {convention!r}")
    return (dh + f) / (1j * m.hbar)


def _candidates(m: MeasurementModel, which: int, ends, dt: float = CANDIDATE_DT,
                convention: str = "endpoint", n: int | None = None) -> tuple[list[HybridState], _Paths]:
    if which not in CANDIDATES:
        raise ValueError(f"candidate must be one of {CANDIDATES}, got {which!r}")
    paths = _paths(m, ends, dt, n)
    c = m.c0
    blocks = [dict() for _ in ends]
    qf, pf = paths.q[-1], paths.p[-1]
    for i in range(m.dim):
        for j in range(i, m.dim):
            if which == 9 and i != j:
                continue
            c0 = c[i] * np.conj(c[j])
            if i == j:
                amps = np.full(len(ends), abs(c[i]) ** 2, dtype=complex)
            else:
                rate = _candidate_rate(m, paths, which, i, j, convention)
                amps = np.array([_rk4_pairs(rate[:, e], c0, paths.h[e])[-1] for e in range(len(ends))])
            for e in range(len(ends)):
                if which == 7:
                    ket = (qf[e, i], pf[e, i])
                    bra = (qf[e, j], pf[e, j])
                else:
                    col = paths.columns[(i, j)]
                    ket = bra = (qf[e, col], pf[e, col])
                blocks[e][(i, j)] = (dyad(*ket, *bra, amps[e]),)
                if i != j:
                    blocks[e][(j, i)] = (dyad(*bra, *ket, np.conj(amps[e])),)
    states = [HybridState.from_points(m.dim, b, float(t)) for b, t in zip(blocks, ends)]
    return states, paths


def build_candidate(m: MeasurementModel, which: int, t: float, dt: float = CANDIDATE_DT,
                    convention: str = "endpoint") -> HybridState:
    """Point-representation candidate solution at time ``t``.

    7: c_ij(t) |psi_i><psi_j| (x) |x_i(t)><x_j(t)|, the product-form guess;
    9: sum_i |c_i|^2 |psi_i><psi_i| (x) |x_i(t)><x_i(t)|, the decohered mixture;
    10: c_ij(t) |psi_i><psi_j| (x) |x_ij(t)><x_ij(t)| along pair midpoints.

    Here x_i follows H_cm + v_i V_cm and x_ij follows H_cm + (v_i + v_j)/2 V_cm
    from (q0, p0).  For 7 the off-diagonal prefactors are integrated with
    V_cm averaged over both endpoints (``"endpoint"``) or as products of
    per-branch phases (``"branch"``).
    """
    if t < m.t0:
        raise ValueError("candidate time precedes t0")
    return _candidates(m, which, [t], dt, convention)[0][0]


def branch_points(m: MeasurementModel, t: float, dt: float = CANDIDATE_DT) -> dict:
    """Pointer positions at ``t`` for every branch ``(i, i)`` and pair midpoint ``(i, j)``."""
    paths = _paths(m, [t], dt)
    return {key: (float(paths.q[-1, 0, col]), float(paths.p[-1, 0, col]))
            for key, col in paths.columns.items()}


def _check_separation(points: dict, bins: PhaseSpaceGrid) -> None:
    seen: dict = {}
    for key, (q, p) in points.items():
        b = bins.bin_index(q, p)
        if b in seen:
            raise SeparationFailure(f"branch points {seen[b]} and {key} share bin {b}")
        seen[b] = key


def earliest_separation(m: MeasurementModel, bins: PhaseSpaceGrid, dt: float, T: float) -> float | None:
    """First sample time at which all branch points and midpoints occupy distinct bins."""
    n = _steps(T, dt)
    h = T / n
    flow = _Flow(m.H_cm, m.V_cm)
    keys = [(i, i) for i in range(m.dim)] + m.pairs()
    us = np.array([m.pair_coupling(i, j) for i, j in keys])
    qs, ps = _leapfrog(flow, m.q0, m.p0, us, h, n)
    for k in range(1, n + 1):
        try:
            _check_separation({key: (qs[k, c], ps[k, c]) for c, key in enumerate(keys)}, bins)
        except SeparationFailure:
            continue
        return m.t0 + k * h
    return None


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Mismatch between the finite-difference time derivative of a candidate
    and the generator applied to it, normalized by the candidate's norm.

    ``blocks`` holds per-block residuals; ``terms`` the norms of the
    left-hand side and of each of the four generator terms, so the terms
    that clash are visible.
    """

    which: int
    t: float
    total: float
    blocks: dict
    amplitude: float
    transport: float
    terms: dict
    dt_fd: float
    fd_stable: bool = True


def _residual_once(m: MeasurementModel, which: int, t: float, dt_fd: float, dt: float,
                   convention: str) -> ResidualReport:
    n = _steps(t - m.t0, dt)
    states, _ = _candidates(m, which, [t - dt_fd, t, t + dt_fd], dt, convention, n)
    before, now, after = states
    flow = _Flow(m.H_cm, m.V_cm)
    norm2 = 0.0
    block_sq: dict = {}
    amp_sq = trans_sq = 0.0
    term_sq = dict.fromkeys(("lhs", "phase_h", "bracket_H", "phase_v", "bracket_V"), 0.0)
    for key in sorted(now.blocks):
        i, j = key
        for a_m, a_0, a_p in zip(before.atoms(i, j), now.atoms(i, j), after.atoms(i, j)):
            w = complex(a_0.amplitude)
            norm2 += abs(w) ** 2
            d_amp = (complex(a_p.amplitude) - complex(a_m.amplitude)) / (2 * dt_fd)
            d_ket = (np.subtract(a_p.ket, a_m.ket)) / (2 * dt_fd)
            d_bra = (np.subtract(a_p.bra, a_m.bra)) / (2 * dt_fd)
            r = _atom_rate(m, flow, i, j, a_0)
            ra = abs(d_amp - r.amplitude_rate) ** 2
            rt = abs(w) ** 2 * (np.sum((d_ket - r.ket_velocity) ** 2) + np.sum((d_bra - r.bra_velocity) ** 2))
            amp_sq += ra
            trans_sq += rt
            block_sq[key] = block_sq.get(key, 0.0) + ra + rt
            term_sq["lhs"] += abs(d_amp) ** 2 + abs(w) ** 2 * (np.sum(d_ket ** 2) + np.sum(d_bra ** 2))
            term_sq["phase_h"] += abs(r.phase_h) ** 2
            term_sq["phase_v"] += abs(r.phase_v) ** 2
            term_sq["bracket_H"] += abs(w) ** 2 * (np.sum(np.square(r.ket_H)) + np.sum(np.square(r.bra_H)))
            term_sq["bracket_V"] += abs(w) ** 2 * (np.sum(np.square(r.ket_V)) + np.sum(np.square(r.bra_V)))
    scale = math.sqrt(norm2)
    return ResidualReport(
        which=which, t=t,
        total=math.sqrt(amp_sq + trans_sq) / scale,
        blocks={k: math.sqrt(v) / scale for k, v in block_sq.items()},
        amplitude=math.sqrt(amp_sq) / scale,
        transport=math.sqrt(trans_sq) / scale,
        terms={k: math.sqrt(v) / scale for k, v in term_sq.items()},
        dt_fd=dt_fd,
    )


def residual_norm(m: MeasurementModel, which: int, t: float, bins: PhaseSpaceGrid,
                  dt_fd: float = FD_STEP, dt: float = CANDIDATE_DT,
                  convention: str = "endpoint", tol: float = RESIDUAL_TOL) -> ResidualReport:
    """Adjudicate whether candidate ``which`` solves the hybrid equation at ``t``.

    Raises SeparationFailure unless all branch points and midpoints sit in
    distinct cells of ``bins``.  The finite-difference step is checked by
    halving it: the report is flagged unstable if the total moves by 10% or
    more while exceeding ``tol``.
    """
    if t <= m.t0:
        raise ValueError("residual needs t > t0")
    if t - dt_fd < m.t0:
        raise ValueError("finite-difference stencil reaches before t0")
    _check_separation(branch_points(m, t, dt), bins)
    rep = _residual_once(m, which, t, dt_fd, dt, convention)
    half = _residual_once(m, which, t, 0.5 * dt_fd, dt, convention)
    small = rep.total <= tol and half.total <= tol
    stable = small or abs(rep.total - half.total) < 0.1 * rep.total
    return ResidualReport(**{**rep.__dict__, "fd_stable": bool(stable)})


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True, eq=False)
class DiagnosticsRow:
    t: float
    trace: float
    hermiticity_residual: float
    purity: float
    linear_entropy: float
    min_eig: float | None
    populations: np.ndarray
    coherences: dict
    in_flight: dict


def decoherence_report(states, bins: PhaseSpaceGrid | None = None,
                       with_min_eig: bool = True) -> list[DiagnosticsRow]:
    """One diagnostics row per state: populations, coherences, purity, S_L, min eigenvalue."""
    rows = []
    for s in states:
        a = assemble(s, bins)
        marg: QuantumMarginal = quantum_marginal(s, bins)
        pur = purity(a)
        n = s.dim
        rows.append(DiagnosticsRow(
            t=float(s.t),
            trace=hybrid_trace(s),
            hermiticity_residual=hermiticity_residual(s),
            purity=pur,
            linear_entropy=1.0 - pur,
            min_eig=min_eigenvalue(a) if with_min_eig else None,
            populations=marg.populations,
            coherences={(i, j): float(abs(marg.matrix[i, j])) for i in range(n) for j in range(i + 1, n)},
            in_flight={(i, j): float(abs(marg.in_flight[i, j])) for i in range(n) for j in range(i + 1, n)},
        ))
    return rows
