"""Exception hierarchy shared across the package.

The CLI maps these onto process exit statuses: ConfigError -> 2,
DataFormatError (and subclasses) -> 3, everything else derived from
ZtwError -> 4.
"""


class ZtwError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ZtwError):
    """Invalid configuration, unknown key, bad CLI usage."""


class DataFormatError(ZtwError):
    """Malformed input data (bad magic, truncation, inconsistent files)."""


class LabelError(DataFormatError):
    """A class label outside the valid range [0, K)."""


class ShapeError(ZtwError):
    """Tensor or layer shape mismatch; message names the offending shapes."""


class NumericError(ZtwError):
    """Non-finite values where finite ones are required."""


class TrainingError(ZtwError):
    """Training diverged (NaN loss) or could not proceed."""


class StageError(ZtwError):
    """Ensemble stage index does not match the provided inputs."""


class CascadeError(ZtwError):
    """Cascade input present when not expected, or missing when required."""


class InfeasibleBudgetError(ZtwError):
    """No threshold on the grid satisfies the requested compute budget."""


class UndefinedCosineError(ZtwError):
    """Gradient cosine requested for a zero-norm gradient."""
