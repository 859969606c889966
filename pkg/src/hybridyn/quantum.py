"""Finite-dimensional quantum sector: plain complex numpy matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch

HERMITIAN_TOL = 1e-12


def _pair(a, b):
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimMismatch(f"expected a square matrix, got shape {a.shape}")
    if a.shape != b.shape:
        raise DimMismatch(f"shapes {a.shape} and {b.shape} differ")
    return a, b


def is_hermitian(a, tol: float = HERMITIAN_TOL) -> bool:
    a = np.asarray(a)
    return a.ndim == 2 and a.shape[0] == a.shape[1] and np.max(np.abs(a - a.conj().T), initial=0.0) <= tol


def commutator(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return a @ b - b @ a


def symmetrized(a, b) -> np.ndarray:
    """Symmetrized product (AB + BA)/2."""
    a, b = _pair(a, b)
    return 0.5 * (a @ b + b @ a)


def schrodinger_rhs(h, rho, hbar: float = 1.0) -> np.ndarray:
    """(1/i hbar) [H, rho]."""
    return commutator(h, rho) / (1j * hbar)


def product_identity_residual(h1, h2, rho1, rho2, hbar: float = 1.0) -> float:
    """Frobenius norm of the defect in the product-commutator factorization

    (1/ih)[H1 (x) H2, r1 (x) r2] = (1/ih)[H1, r1] (x) H2 r2 + r1 H1 (x) (1/ih)[H2, r2]

    The identity is algebraic, so the result is pure rounding.
    """
    h1, rho1 = _pair(h1, rho1)
    h2, rho2 = _pair(h2, rho2)
    lhs = schrodinger_rhs(np.kron(h1, h2), np.kron(rho1, rho2), hbar)
    rhs = (np.kron(schrodinger_rhs(h1, rho1, hbar), h2 @ rho2)
           + np.kron(rho1 @ h1, schrodinger_rhs(h2, rho2, hbar)))
    return float(np.linalg.norm(lhs - rhs))


def identity_scale(h1, h2, rho1, rho2, hbar: float = 1.0) -> float:
    """Magnitude against which the identity residual is judged."""
    n = [np.linalg.norm(np.asarray(x)) for x in (h1, h2, rho1, rho2)]
    return max(n[0] * n[1] * n[2] * n[3] / hbar, np.finfo(float).tiny)


def random_hermitian(n: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return 0.5 * (a + a.conj().T)


def random_state(n: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


@dataclass(frozen=True, eq=False)
class MeasuredBasisModel:
    """Quantum side of an ideal measurement.

    H_qm = sum_i h_i |psi_i><psi_i| and V_qm = sum_i v_i |psi_i><psi_i| are
    diagonal in the same basis, so they commute.  ``c0`` holds the initial
    amplitudes of the superposition being measured.
    """

    h: np.ndarray
    v: np.ndarray
    c0: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        v = np.array(self.v, dtype=float)
        c0 = np.array(self.c0, dtype=complex)
        if not (h.ndim == v.ndim == c0.ndim == 1 and len(h) == len(v) == len(c0) >= 1):
            raise DimMismatch("h, v and c0 must be 1-d arrays of equal length")
        if abs(np.sum(np.abs(c0) ** 2) - 1.0) > 1e-12:
            raise ValueError("initial amplitudes must be normalized")
        for name, arr in (("h", h), ("v", v), ("c0", c0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return len(self.h)

    @property
    def hamiltonian(self) -> np.ndarray:
        return np.diag(self.h).astype(complex)

    @property
    def coupling(self) -> np.ndarray:
        return np.diag(self.v).astype(complex)

    def initial_density(self) -> np.ndarray:
        return np.outer(self.c0, self.c0.conj())

    def degenerate_pairs(self) -> list[tuple[int, int]]:
        n = self.dim
        return [(i, j) for i in range(n) for j in range(i + 1, n) if self.v[i] == self.v[j]]
