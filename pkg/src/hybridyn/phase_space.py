"""Discretized classical phase space.

Kernels are sampled at cell centers ``q_k = q_min + (k + 1/2) dq`` (same for
p); arrays are indexed ``[k_q, k_p]``.  Derivatives are fourth-order finite
differences: centered in the interior, one-sided five-point stencils on the
two outermost cells, so every stencil is exact for polynomials of degree
<= 4 along the differentiated axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, Union

import numpy as np

from .errors import BoundaryMass, GridMismatch, NonPositiveWidth, OutOfDomain, ZeroMass

STATE_TOL = 1e-9
BOUNDARY_CELLS = 6
BOUNDARY_TOL = 1e-8
COINCIDENCE_TOL = 1e-12

Tag = Literal["state", "observable", "coherence"]


@dataclass(frozen=True)
class PhaseSpaceGrid:
    q_min: float
    q_max: float
    n_q: int
    p_min: float
    p_max: float
    n_p: int

    def __post_init__(self):
        if self.n_q < 8 or self.n_p < 8:
            raise ValueError("grid needs at least 8 cells per axis")
        if not (self.q_max > self.q_min and self.p_max > self.p_min):
            raise ValueError("grid bounds must satisfy max > min")

    @property
    def dq(self) -> float:
        return (self.q_max - self.q_min) / self.n_q

    @property
    def dp(self) -> float:
        return (self.p_max - self.p_min) / self.n_p

    @property
    def cell_area(self) -> float:
        return self.dq * self.dp

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_q, self.n_p)

    @property
    def q(self) -> np.ndarray:
        return self.q_min + (np.arange(self.n_q) + 0.5) * self.dq

    @property
    def p(self) -> np.ndarray:
        return self.p_min + (np.arange(self.n_p) + 0.5) * self.dp

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.q, self.p, indexing="ij")

    def contains(self, q: float, p: float) -> bool:
        return self.q_min <= q < self.q_max and self.p_min <= p < self.p_max

    def bin_index(self, q: float, p: float) -> tuple[int, int]:
        """Cell ``(k_q, k_p)`` whose center is nearest to ``(q, p)``."""
        if not self.contains(q, p):
            raise OutOfDomain(f"point ({q!r}, {p!r}) lies outside the grid")
        kq = min(int(np.floor((q - self.q_min) / self.dq)), self.n_q - 1)
        kp = min(int(np.floor((p - self.p_min) / self.dp)), self.n_p - 1)
        return kq, kp


@dataclass(frozen=True, eq=False)
class ClassicalKernel:
    """A diagonal classical operator f(q_cm, p_cm), sampled on a grid.

    ``state`` kernels must be real, nonnegative and normalized;
    ``observable`` kernels are arbitrary real fields; ``coherence`` kernels
    (off-diagonal quantum blocks) may be complex.
    """

    grid: PhaseSpaceGrid
    values: np.ndarray
    tag: Tag = "observable"

    def __post_init__(self):
        values = np.array(self.values, dtype=complex)
        if values.shape != self.grid.shape:
            raise GridMismatch(f"values shape {values.shape} != grid shape {self.grid.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.tag == "state":
            if np.any(values.imag != 0.0):
                raise ValueError("state kernel must be real")
            if np.any(values.real < 0.0):
                raise ValueError("state kernel must be nonnegative")
            if abs(self.mass() - 1.0) > STATE_TOL:
                raise ValueError(f"state kernel must integrate to 1, got {self.mass()!r}")
        elif self.tag == "observable":
            if np.any(values.imag != 0.0):
                raise ValueError("observable kernel must be real")
        elif self.tag != "coherence":
            raise ValueError(f"unknown kernel tag {self.tag!r}")

    @classmethod
    def from_function(cls, grid: PhaseSpaceGrid, f: Callable, tag: Tag = "observable"):
        Q, P = grid.mesh()
        return cls(grid, np.broadcast_to(f(Q, P), grid.shape), tag)

    def mass(self) -> complex:
        total = np.sum(self.values) * self.grid.cell_area
        return float(total.real) if total.imag == 0.0 else complex(total)

    def with_values(self, values, tag: Tag | None = None) -> "ClassicalKernel":
        if tag is None:
            tag = "observable" if np.all(np.imag(values) == 0.0) else "coherence"
        return ClassicalKernel(self.grid, values, tag)


@dataclass(frozen=True)
class PointState:
    """Weighted delta state |q><q| (x) |p><p| with finite weight."""

    q: float
    p: float
    amplitude: complex = 1.0

    @property
    def ket(self) -> tuple[float, float]:
        return (self.q, self.p)

    @property
    def bra(self) -> tuple[float, float]:
        return (self.q, self.p)


@dataclass(frozen=True)
class CrossDyad:
    """|q_ket><q_bra| (x) |p_ket><p_bra| weighted by ``amplitude``."""

    q_ket: float
    p_ket: float
    q_bra: float
    p_bra: float
    amplitude: complex = 1.0

    @property
    def ket(self) -> tuple[float, float]:
        return (self.q_ket, self.p_ket)

    @property
    def bra(self) -> tuple[float, float]:
        return (self.q_bra, self.p_bra)

    @property
    def coincident(self) -> bool:
        return (abs(self.q_ket - self.q_bra) <= COINCIDENCE_TOL
                and abs(self.p_ket - self.p_bra) <= COINCIDENCE_TOL)

    def demote(self) -> PointState:
        return PointState(self.q_ket, self.p_ket, self.amplitude)


Atom = Union[PointState, CrossDyad]


def dyad(q_ket, p_ket, q_bra, p_bra, amplitude=1.0) -> Atom:
    """Build a dyad, demoting it to a PointState when ket and bra coincide."""
    d = CrossDyad(float(q_ket), float(p_ket), float(q_bra), float(p_bra), complex(amplitude))
    return d.demote() if d.coincident else d


def smooth_delta(q0: float, p0: float, sigma_q: float, sigma_p: float,
                 grid: PhaseSpaceGrid) -> ClassicalKernel:
    """Gaussian surrogate of the point state at ``(q0, p0)``, normalized on the grid."""
    if sigma_q <= 0 or sigma_p <= 0:
        raise NonPositiveWidth(f"widths must be positive, got ({sigma_q}, {sigma_p})")
    if (q0 - 6 * sigma_q < grid.q_min or q0 + 6 * sigma_q > grid.q_max
            or p0 - 6 * sigma_p < grid.p_min or p0 + 6 * sigma_p > grid.p_max):
        raise OutOfDomain(f"6-sigma box around ({q0}, {p0}) leaves the grid")
    Q, P = grid.mesh()
    g = np.exp(-0.5 * ((Q - q0) / sigma_q) ** 2 - 0.5 * ((P - p0) / sigma_p) ** 2)
    g /= np.sum(g) * grid.cell_area
    return ClassicalKernel(grid, g, "state")


def boundary_fraction(values: np.ndarray, cells: int = BOUNDARY_CELLS) -> float:
    """Fraction of sum|values| lying within ``cells`` of any grid edge."""
    a = np.abs(values)
    total = np.sum(a)
    if total == 0.0:
        return 0.0
    inner = np.sum(a[cells:-cells, cells:-cells])
    return float((total - inner) / total)


def check_boundary(values: np.ndarray, tol: float | None = BOUNDARY_TOL) -> None:
    if tol is None:
        return
    frac = boundary_fraction(values)
    if frac >= tol:
        raise BoundaryMass(f"boundary mass fraction {frac:.3e} >= {tol:.1e}")


def diff(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order first derivative of a sampled field along ``axis``."""
    f = np.moveaxis(np.asarray(values), axis, 0)
    out = np.empty_like(f)
    out[2:-2] = (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * h)
    out[0] = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * h)
    out[1] = (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / (12.0 * h)
    out[-1] = (25.0 * f[-1] - 48.0 * f[-2] + 36.0 * f[-3] - 16.0 * f[-4] + 3.0 * f[-5]) / (12.0 * h)
    out[-2] = (3.0 * f[-1] + 10.0 * f[-2] - 18.0 * f[-3] + 6.0 * f[-4] - f[-5]) / (12.0 * h)
    return np.moveaxis(out, 0, axis)


def _guarded(k: ClassicalKernel, boundary_tol):
    # observables (H, V, q, ...) are not localized; the guard concerns states only
    if k.tag != "observable":
        check_boundary(k.values, boundary_tol)


def partial_q(k: ClassicalKernel, boundary_tol: float | None = BOUNDARY_TOL) -> ClassicalKernel:
    _guarded(k, boundary_tol)
    return k.with_values(diff(k.values, k.grid.dq, 0))


def partial_p(k: ClassicalKernel, boundary_tol: float | None = BOUNDARY_TOL) -> ClassicalKernel:
    _guarded(k, boundary_tol)
    return k.with_values(diff(k.values, k.grid.dp, 1))


def poisson_bracket(a: ClassicalKernel, b: ClassicalKernel,
                    boundary_tol: float | None = BOUNDARY_TOL) -> ClassicalKernel:
    """{A, B} = dA/dq dB/dp - dA/dp dB/dq."""
    if a.grid != b.grid:
        raise GridMismatch("Poisson bracket of kernels on different grids")
    _guarded(a, boundary_tol)
    _guarded(b, boundary_tol)
    g = a.grid
    aq, ap = diff(a.values, g.dq, 0), diff(a.values, g.dp, 1)
    bq, bp = diff(b.values, g.dq, 0), diff(b.values, g.dp, 1)
    return a.with_values(aq * bp - ap * bq)


def liouville_rhs(h: ClassicalKernel, rho: ClassicalKernel,
                  boundary_tol: float | None = BOUNDARY_TOL) -> ClassicalKernel:
    """Time derivative of ``rho`` under the Liouville equation with Hamiltonian ``h``."""
    return poisson_bracket(h, rho, boundary_tol)


def integrate(k: ClassicalKernel):
    return k.mass()


def classical_mean(f: ClassicalKernel, rho: ClassicalKernel) -> float:
    """Mean of ``f`` in ``rho``: Tr(f rho) / Tr(rho)."""
    if f.grid != rho.grid:
        raise GridMismatch("observable and state live on different grids")
    norm = np.sum(rho.values) * rho.grid.cell_area
    if abs(norm) <= 1e-12:
        raise ZeroMass("state has (near) zero mass")
    num = np.sum(f.values * rho.values) * rho.grid.cell_area
    return float((num / norm).real)


@dataclass(frozen=True)
class Representable:
    """Derivative of a delta state along ``axis``; it generates transport of the point."""

    q: float
    p: float
    axis: str
    amplitude: complex


@dataclass(frozen=True)
class Annihilated:
    axis: str


def operator_derivative(d: Atom, axis: str) -> Representable | Annihilated:
    """Derivative with respect to the operator q_cm or p_cm.

    Only functions of q_cm, p_cm (delta states) are differentiated; a dyad
    with distinct ket and bra does not commute with q_cm, p_cm and is sent
    to zero.
    """
    if axis not in ("q", "p"):
        raise ValueError(f"axis must be 'q' or 'p', got {axis!r}")
    if isinstance(d, CrossDyad):
        if not d.coincident:
            return Annihilated(axis)
        d = d.demote()
    return Representable(d.q, d.p, axis, d.amplitude)
