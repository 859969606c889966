"""Exception hierarchy.

Every error carries a ``guard`` name; the CLI prints it on the last output
line as ``ERROR <code> <guard>``.
"""


class HybridynError(Exception):
    guard = "error"
    exit_code = 4


class OutOfDomain(HybridynError):
    guard = "out_of_domain"


class NonPositiveWidth(HybridynError, ValueError):
    guard = "non_positive_width"
    exit_code = 3


class BoundaryMass(HybridynError):
    guard = "boundary_mass"


class GridMismatch(HybridynError, ValueError):
    guard = "grid_mismatch"


class ZeroMass(HybridynError, ValueError):
    guard = "zero_mass"


class ZeroTrace(HybridynError, ValueError):
    guard = "zero_trace"


class DimMismatch(HybridynError, ValueError):
    guard = "dim_mismatch"


class CflViolation(HybridynError):
    guard = "cfl"
    exit_code = 3


class NumericalBlowup(HybridynError):
    guard = "numerical_blowup"


class SeparationFailure(HybridynError):
    guard = "separation"
    exit_code = 3


class AssemblySizeError(HybridynError):
    guard = "assembly_size_cap"
    exit_code = 3


class ConfigError(HybridynError):
    exit_code = 3

    def __init__(self, message, guard="config"):
        super().__init__(message)
        self.guard = guard


class InvariantViolation(HybridynError):
    guard = "invariant"
