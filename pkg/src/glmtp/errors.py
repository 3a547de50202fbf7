"""Exception hierarchy shared by every module of the package."""


class GLMTPError(Exception):
    """Base class for all package errors."""


class ValidationError(GLMTPError, ValueError):
    """Input or configuration failed validation (CLI exit code 2)."""


class EstimationError(GLMTPError, RuntimeError):
    """A runtime failure while estimating (CLI exit code 3)."""


class MalformedInput(ValidationError):
    pass


class SupportViolation(ValidationError):
    pass


class BoundsViolation(ValidationError):
    pass


class EmptySupport(ValidationError):
    pass


class NonUniqueAfterCollapse(GLMTPError):
    pass


class InvalidFoldCount(ValidationError):
    pass


class ArityMismatch(ValidationError):
    pass


class SingularDesign(EstimationError):
    pass


class EmptyRiskSet(EstimationError):
    pass


class NumericalOverflow(EstimationError):
    pass


class DegenerateVariance(EstimationError):
    pass


class AllZeroWeights(EstimationError):
    pass


class EIFNotSolved(EstimationError):
    pass


class SampleMismatch(ValidationError):
    pass


class IntractableSupport(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass
