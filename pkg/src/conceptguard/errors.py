"""Exception hierarchy shared across the package.

Validation-type errors (bad arguments, bad configs, bad data) map to CLI
exit code 2; everything else maps to 3.
"""


class ConceptGuardError(Exception):
    """Base class for all package errors."""


class ArgumentError(ConceptGuardError):
    """A caller passed an out-of-contract argument value."""


class ConfigurationError(ConceptGuardError):
    """A configuration value is invalid (bad enum, bad bounds, bad file)."""


class DataError(ConceptGuardError):
    """A dataset violates its contract (missing files, wrong image count)."""


class ShapeError(ConceptGuardError):
    """Tensor or array shapes are incompatible."""


class PlacementError(ConceptGuardError):
    """Sprite placements overlap or fall outside the canvas."""


class StateError(ConceptGuardError):
    """An operation was called in an invalid state or order."""


class NumericError(ConceptGuardError):
    """A non-finite value appeared where finite values are required."""


class ConsistencyError(ConceptGuardError):
    """Two structures that must agree (e.g. layer sets) do not."""


VALIDATION_ERRORS = (ArgumentError, ConfigurationError, DataError)
