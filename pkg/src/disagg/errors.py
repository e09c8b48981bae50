"""Exception hierarchy shared by all modules."""


class DisaggError(Exception):
    """Base class for errors raised by this package."""


class DomainError(DisaggError, ValueError):
    """Non-finite or out-of-range numerical input."""


class DegenerateStateError(DisaggError, ValueError):
    """A population set with non-positive density."""


class InputError(DisaggError, ValueError):
    """Invalid argument value or combination."""


class ShapeError(InputError):
    """Extents incompatible with the requested layout."""


class DecompositionError(InputError):
    """Axis too short for the requested number of partitions."""


class ConsistencyError(DisaggError, RuntimeError):
    """Internal bookkeeping invariant broken (e.g. asymmetric neighbor links)."""


class ContractViolation(DisaggError, RuntimeError):
    """A kernel broke its declared access contract (debug mode)."""


class StructureError(DisaggError, ValueError):
    """Multi-resolution structure is invalid or incomplete."""


class ConfigurationError(DisaggError, ValueError):
    """Boundary or solver configuration cannot be satisfied."""


class CoverageError(DisaggError, ValueError):
    """Streaming would read a neighbor that no boundary condition covers."""


class NumericalError(DisaggError, FloatingPointError):
    """Non-finite state detected, with the offending voxel."""

    def __init__(self, message, voxel=None):
        super().__init__(message)
        self.voxel = voxel


class InstabilityError(NumericalError):
    """Populations blew up during a run."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class SchemaError(InputError):
    """A configuration document failed validation; ``diagnostics`` lists every problem."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))
