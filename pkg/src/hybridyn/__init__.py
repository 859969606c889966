"""Hybrid quantum-classical dynamics of an ideal measurement."""

from .dynamics import (BranchTrajectory, CoherencePhase, MeasurementModel, build_candidate,
                       decoherence_report, evolve_grid, evolve_points, hamilton_trajectory,
                       hybrid_generator, initial_grid_state, initial_points_state, phase_ode,
                       residual_norm)
from .errors import HybridynError
from .hybrid import (AssembledOperator, HybridState, assemble, hybrid_trace, idempotency_residual,
                     linear_entropy, min_eigenvalue, purity, quantum_marginal, von_neumann_entropy)
from .phase_space import (ClassicalKernel, CrossDyad, PhaseSpaceGrid, PointState, classical_mean,
                          dyad, liouville_rhs, operator_derivative, partial_p, partial_q,
                          poisson_bracket, smooth_delta)
from .polynomial import Polynomial
from .quantum import MeasuredBasisModel, commutator, product_identity_residual, symmetrized

__version__ = "0.1.0"
