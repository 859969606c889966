"""Real polynomials in phase-space coordinates (q, p).

Coefficient lists follow graded order over monomials q^a p^b: by total
degree, then by descending power of q::

    1, q, p, q^2, qp, p^2, q^3, q^2p, qp^2, p^3, q^4, ...

so ``[0, 0, 0, 0.5, 0, 0.5]`` is (q^2 + p^2)/2 and ``[0, 1]`` is q.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

MAX_DEGREE = 4


def monomial_order(max_degree: int = MAX_DEGREE) -> list[tuple[int, int]]:
    order = []
    for d in range(max_degree + 1):
        for a in range(d, -1, -1):
            order.append((a, d - a))
    return order


@dataclass(frozen=True)
class Polynomial:
    """Sparse polynomial ``sum c[a, b] q^a p^b`` of total degree <= 4."""

    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (a, b), c in self.terms.items():
            if a < 0 or b < 0:
                raise ValueError("negative exponent")
            if c != 0.0:
                clean[(int(a), int(b))] = float(c)
        if clean and max(a + b for a, b in clean) > MAX_DEGREE:
            raise ValueError(f"polynomial degree exceeds {MAX_DEGREE}")
        object.__setattr__(self, "terms", clean)

    @classmethod
    def from_coefficients(cls, coeffs: Iterable[float]) -> "Polynomial":
        coeffs = list(coeffs)
        order = monomial_order()
        if len(coeffs) > len(order):
            raise ValueError(f"at most {len(order)} coefficients (degree {MAX_DEGREE})")
        return cls({order[k]: c for k, c in enumerate(coeffs)})

    def coefficients(self) -> list[float]:
        order = monomial_order(self.degree)
        return [self.terms.get(m, 0.0) for m in order]

    @property
    def degree(self) -> int:
        return max((a + b for a, b in self.terms), default=0)

    def __call__(self, q, p):
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        out = np.zeros(np.broadcast(q, p).shape)
        for (a, b), c in sorted(self.terms.items()):
            out = out + c * q**a * p**b
        return out if out.ndim else float(out)

    def d_q(self) -> "Polynomial":
        return Polynomial({(a - 1, b): a * c for (a, b), c in self.terms.items() if a > 0})

    def d_p(self) -> "Polynomial":
        return Polynomial({(a, b - 1): b * c for (a, b), c in self.terms.items() if b > 0})

    def __add__(self, other: "Polynomial") -> "Polynomial":
        terms = dict(self.terms)
        for m, c in other.terms.items():
            terms[m] = terms.get(m, 0.0) + c
        return Polynomial(terms)

    def scaled(self, factor: float) -> "Polynomial":
        return Polynomial({m: factor * c for m, c in self.terms.items()})

    def is_zero(self) -> bool:
        return not self.terms
