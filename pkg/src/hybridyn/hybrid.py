"""Hybrid density operators on H_qm (x) H^q_cm (x) H^p_cm.

A :class:`HybridState` is an N x N array of classical blocks, one per
quantum dyad |psi_i><psi_j|.  Blocks are either grid kernels (``"grid"``
representation) or lists of point states and cross dyads (``"points"``).

For eigen-diagnostics a state is assembled over a finite basis
``(i, k_q, k_p)`` with flat index ``(i * n_q + k_q) * n_p + k_p``.  A point
at (q, p) maps to the unit vector of the cell containing it.  The
assembled operator is stored as its exact block-diagonal decomposition
(connected components of the nonzero pattern), which yields the same
spectrum as the full dense matrix while only solving the occupied blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import AssemblySizeError, DimMismatch, GridMismatch, ZeroTrace
from .phase_space import CrossDyad, PhaseSpaceGrid, PointState, dyad

MAX_DENSE_DIM = 4096
ZERO_EIG_REL = 1e-10
NEGATIVE_EIG_TOL = 1e-10

Representation = Literal["grid", "points"]


@dataclass(frozen=True, eq=False)
class HybridState:
    """rho = sum_ij |psi_i><psi_j| (x) rho_cm^ij.

    ``blocks`` is a complex array of shape ``(N, N, n_q, n_p)`` for the grid
    representation, or a dict ``{(i, j): tuple of atoms}`` for points.
    """

    dim: int
    representation: Representation
    blocks: object
    grid: PhaseSpaceGrid | None = None
    t: float = 0.0

    def __post_init__(self):
        if self.representation == "grid":
            if self.grid is None:
                raise GridMismatch("grid representation needs a grid")
            b = np.array(self.blocks, dtype=complex)
            if b.shape != (self.dim, self.dim) + self.grid.shape:
                raise DimMismatch(f"block array shape {b.shape} does not match N={self.dim} and grid")
            b.setflags(write=False)
            object.__setattr__(self, "blocks", b)
        elif self.representation == "points":
            blocks = {}
            for (i, j), atoms in dict(self.blocks).items():
                if not (0 <= i < self.dim and 0 <= j < self.dim):
                    raise DimMismatch(f"block index ({i}, {j}) outside N={self.dim}")
                blocks[(int(i), int(j))] = tuple(atoms)
            object.__setattr__(self, "blocks", blocks)
        else:
            raise ValueError(f"unknown representation {self.representation!r}")

    @classmethod
    def from_grid(cls, blocks, grid: PhaseSpaceGrid, t: float = 0.0) -> "HybridState":
        blocks = np.asarray(blocks)
        return cls(blocks.shape[0], "grid", blocks, grid, t)

    @classmethod
    def from_points(cls, dim: int, blocks: dict, t: float = 0.0) -> "HybridState":
        return cls(dim, "points", blocks, None, t)

    def atoms(self, i: int, j: int) -> tuple:
        return self.blocks.get((i, j), ())

    def records(self) -> Iterator[tuple]:
        """Yield ``(i, j, q_ket, p_ket, q_bra, p_bra, amplitude)`` for every atom."""
        for (i, j) in sorted(self.blocks):
            for a in self.blocks[(i, j)]:
                yield (i, j, a.ket[0], a.ket[1], a.bra[0], a.bra[1], complex(a.amplitude))


def points_from_records(dim: int, records, t: float = 0.0) -> HybridState:
    blocks: dict = {}
    for i, j, qk, pk, qb, pb, amp in records:
        blocks.setdefault((int(i), int(j)), []).append(dyad(qk, pk, qb, pb, amp))
    return HybridState.from_points(dim, blocks, t)


def hybrid_trace(s: HybridState) -> float:
    """Quantum trace of the classical masses of the diagonal blocks."""
    if s.representation == "grid":
        return float(sum(np.sum(s.blocks[i, i]).real for i in range(s.dim)) * s.grid.cell_area)
    total = 0.0
    for i in range(s.dim):
        for a in s.atoms(i, i):
            # distinct points are orthogonal: a cross dyad has zero trace
            if isinstance(a, PointState):
                total += complex(a.amplitude).real
    return total


def hermiticity_residual(s: HybridState) -> float:
    """Largest deviation of block (j, i) from the adjoint of block (i, j)."""
    if s.representation == "grid":
        b = s.blocks
        return float(np.max(np.abs(b - np.conj(np.swapaxes(b, 0, 1))), initial=0.0))
    worst = 0.0
    for (i, j), atoms in s.blocks.items():
        mirror = s.atoms(j, i)
        if len(mirror) != len(atoms):
            return float("inf")
        for a, b in zip(atoms, mirror):
            worst = max(worst,
                        abs(complex(a.amplitude) - complex(b.amplitude).conjugate()),
                        abs(a.ket[0] - b.bra[0]), abs(a.ket[1] - b.bra[1]),
                        abs(a.bra[0] - b.ket[0]), abs(a.bra[1] - b.ket[1]))
    return worst


@dataclass(frozen=True, eq=False)
class AssembledOperator:
    """Hermitian matrix of size ``dim`` stored as disjoint dense diagonal blocks.

    ``groups`` is a list of ``(indices, mats)`` with ``indices`` of shape
    ``(m, k)`` (flat basis indices of ``m`` blocks of size ``k``) and
    ``mats`` of shape ``(m, k, k)``.  Entries outside all blocks are zero.
    """

    dim: int
    groups: list = field(default_factory=list)

    @property
    def support(self) -> int:
        return sum(idx.size for idx, _ in self.groups)

    def trace(self) -> float:
        return float(sum(np.einsum("mii->", mats).real for _, mats in self.groups))

    def frobenius(self) -> float:
        return float(np.sqrt(sum(np.sum(np.abs(mats) ** 2) for _, mats in self.groups)))

    def hermiticity_residual(self) -> float:
        return float(max((np.max(np.abs(m - np.conj(np.swapaxes(m, 1, 2)))) for _, m in self.groups),
                         default=0.0))

    def to_dense(self) -> np.ndarray:
        if self.dim > MAX_DENSE_DIM:
            raise AssemblySizeError(
                f"dense matrix of dimension {self.dim} exceeds the cap {MAX_DENSE_DIM}; "
                "use fewer bins or a smaller quantum dimension")
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for idx, mats in self.groups:
            for row, mat in zip(idx, mats):
                out[np.ix_(row, row)] += mat
        return out

    def eigenvalues(self) -> np.ndarray:
        """Spectrum over the occupied blocks plus one 0 standing for the empty rest."""
        vals = []
        for idx, mats in self.groups:
            if mats.shape[-1] > MAX_DENSE_DIM:
                raise AssemblySizeError(f"dense eigensolve of size {mats.shape[-1]} exceeds the cap")
            vals.append(np.linalg.eigvalsh(mats).ravel())
        if self.support < self.dim:
            vals.append(np.zeros(1))
        return np.sort(np.concatenate(vals)) if vals else np.zeros(1)

    def scaled(self, factor: float) -> "AssembledOperator":
        return AssembledOperator(self.dim, [(idx, mats * factor) for idx, mats in self.groups])


def flat_index(i: int, kq: int, kp: int, bins: PhaseSpaceGrid) -> int:
    return (i * bins.n_q + kq) * bins.n_p + kp


def assemble(s: HybridState, bins: PhaseSpaceGrid | None = None) -> AssembledOperator:
    """Realize ``s`` as a Hermitian matrix over ``(quantum) x (q bins) x (p bins)``."""
    if s.representation == "grid":
        if bins is not None and bins != s.grid:
            raise GridMismatch("grid states assemble only over their own grid")
        g = s.grid
        n = s.dim
        cells = g.n_q * g.n_p
        # each cell x carries the N x N matrix rho_ij(x) dq dp on the classical diagonal
        mats = np.moveaxis(s.blocks.reshape(n, n, cells), 2, 0) * g.cell_area
        idx = np.arange(cells)[:, None] + cells * np.arange(n)[None, :]
        return AssembledOperator(n * cells, [(idx, mats)])

    if bins is None:
        raise GridMismatch("point states need a bin grid for assembly")
    entries: dict = {}
    for i, j, qk, pk, qb, pb, amp in s.records():
        row = flat_index(i, *bins.bin_index(qk, pk), bins)
        col = flat_index(j, *bins.bin_index(qb, pb), bins)
        entries[(row, col)] = entries.get((row, col), 0.0) + amp
    dim = s.dim * bins.n_q * bins.n_p
    if not entries:
        return AssembledOperator(dim, [])
    nodes = np.unique(np.array(list(entries)).ravel())
    local = {int(n): k for k, n in enumerate(nodes)}
    rows = [local[r] for r, _ in entries]
    cols = [local[c] for _, c in entries]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
    ncomp, labels = connected_components(graph, directed=False)
    by_size: dict = {}
    for comp in range(ncomp):
        members = nodes[labels == comp]
        by_size.setdefault(len(members), []).append(members)
    groups = []
    for size in sorted(by_size):
        idx = np.array(by_size[size])
        mats = np.zeros((len(idx), size, size), dtype=complex)
        groups.append((idx, mats))
    where = {}
    for g, (idx, _) in enumerate(groups):
        for m, row in enumerate(idx):
            for k, node in enumerate(row):
                where[int(node)] = (g, m, k)
    for (r, c), val in entries.items():
        g, m, kr = where[r]
        _, _, kc = where[c]
        groups[g][1][m, kr, kc] += val
    return AssembledOperator(dim, groups)


def min_eigenvalue(a: AssembledOperator) -> float:
    ev = a.eigenvalues()
    scale = max(np.max(np.abs(ev)), np.finfo(float).tiny)
    lam = float(ev[0])
    return 0.0 if abs(lam) < ZERO_EIG_REL * scale else lam


def _normalized(a: AssembledOperator) -> AssembledOperator:
    tr = a.trace()
    if tr <= 1e-12:
        raise ZeroTrace(f"operator trace {tr!r} is not positive")
    return a.scaled(1.0 / tr)


def purity(a: AssembledOperator) -> float:
    """tr(rho^2) after normalizing the trace to 1."""
    a = _normalized(a)
    return float(sum(np.sum(np.abs(mats) ** 2) for _, mats in a.groups))


def idempotency_residual(a: AssembledOperator) -> float:
    """Frobenius norm of rho^2 - rho after trace normalization."""
    a = _normalized(a)
    total = 0.0
    for _, mats in a.groups:
        total += np.sum(np.abs(mats @ mats - mats) ** 2)
    return float(np.sqrt(total))


def linear_entropy(a: AssembledOperator) -> float:
    return 1.0 - purity(a)


@dataclass(frozen=True)
class Undefined:
    """Von Neumann entropy of an operator with a negative eigenvalue."""

    min_eigenvalue: float

    def __str__(self) -> str:
        return "undefined"


def von_neumann_entropy(a: AssembledOperator) -> float | Undefined:
    a = _normalized(a)
    ev = a.eigenvalues()
    if ev[0] < -NEGATIVE_EIG_TOL:
        return Undefined(float(ev[0]))
    ev = ev[ev > 0.0]
    return float(-np.sum(ev * np.log(ev)))


@dataclass(frozen=True, eq=False)
class QuantumMarginal:
    """Partial trace over the classical factor.

    ``matrix[i, j]`` sums block (i, j) weighted by the overlap of its ket and
    bra classical points; ``in_flight[i, j]`` collects the raw amplitudes of
    cross dyads whose ket and bra do not overlap.
    """

    matrix: np.ndarray
    in_flight: np.ndarray

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.matrix))


def quantum_marginal(s: HybridState, bins: PhaseSpaceGrid | None = None) -> QuantumMarginal:
    n = s.dim
    m = np.zeros((n, n), dtype=complex)
    flight = np.zeros((n, n), dtype=complex)
    if s.representation == "grid":
        m[:] = np.sum(s.blocks, axis=(2, 3)) * s.grid.cell_area
        return QuantumMarginal(m, flight)
    for i, j, qk, pk, qb, pb, amp in s.records():
        if bins is not None:
            overlap = bins.bin_index(qk, pk) == bins.bin_index(qb, pb)
        else:
            overlap = not isinstance(dyad(qk, pk, qb, pb), CrossDyad)
        if overlap:
            m[i, j] += amp
        else:
            flight[i, j] += amp
    return QuantumMarginal(m, flight)
