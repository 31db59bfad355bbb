"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1,
DivergenceError -> 2, I/O problems -> 3.
"""


class ValidationError(ValueError):
    """Bad input: invalid spec fields, shape mismatches, unknown ids/keys."""


class FormatError(ValidationError):
    """Malformed serialized payload (bad magic, version, or truncation)."""


class DivergenceError(RuntimeError):
    """Training produced NaN/inf loss; carries diagnostics in args."""
