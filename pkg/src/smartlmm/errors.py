"""Exception hierarchy shared across the package."""


class SmartLMMError(Exception):
    """Base class for all package errors."""


class ValidationError(SmartLMMError):
    """Input data or configuration violates a documented contract."""


class SchemaError(ValidationError):
    """Unknown covariate, wrong vector length, or malformed layout."""


class InvalidQueryError(ValidationError):
    """A DTR or treatment sequence does not belong to the governing design."""


class PositivityError(ValidationError):
    """A randomization probability is zero or one where it must not be."""


class InsufficientDataError(ValidationError):
    """A moment estimator has no observations to work with."""


class NumericalError(SmartLMMError):
    """Linear algebra or optimization failed."""


class IdentifiabilityError(NumericalError):
    """Weighted Gram matrix is rank deficient."""

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        if message is None:
            message = "weighted Gram matrix is rank deficient; offending columns: " + ", ".join(
                map(str, self.columns)
            )
        super().__init__(message)
