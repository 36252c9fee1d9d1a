"""Exception hierarchy shared across the package."""


class BDFError(Exception):
    """Base class for all package errors."""


class StructuralError(BDFError):
    """A row or dataset is missing a parent required by the model structure."""


class BoundaryError(BDFError):
    """A probability sits exactly on 0 or 1 where the log-likelihood is undefined."""


class SingularInformationError(BDFError):
    """The observed information matrix of a logistic fit is not invertible."""


class SeparationError(BDFError):
    """Complete or quasi-complete separation: the logistic MLE does not exist."""


class PriorError(BDFError):
    """An invalid prior, e.g. a covariance that stopped being positive-definite."""


class SamplerError(BDFError):
    """Unrecoverable failure of the posterior sampler."""


class IdentificationError(BDFError):
    """The causal structure does not identify the requested estimand."""


class CellSparsityError(BDFError):
    """Covariate cells needed by a bias correction are empty in the external data."""

    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = tuple(cells)
