"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (see cli.EXIT_CODES), so new
error types should subclass one of the three broad classes below.
"""


class EscaipError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EscaipError):
    """Invalid configuration: bad hyperparameters, cutoffs, ratios, keys."""


class ContractError(EscaipError):
    """API misuse: an operation was called outside its stated preconditions."""


class ShapeError(ContractError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(EscaipError):
    """Problems with input data: non-finite coordinates, unknown species, ..."""


class ParseError(DataError):
    """Malformed file content; message carries the offending line number."""


class UnsupportedCellError(DataError):
    """Lattice present but not orthorhombic (the only supported cell class)."""


class NumericalError(EscaipError):
    """Numerical failure at runtime (NaN loss, diverged integration, ...)."""
