"""Exception hierarchy shared across the package."""


class VitaeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(VitaeError, ValueError):
    pass


class NonFinite(VitaeError, FloatingPointError):
    """An operation produced NaN or Inf. Training treats this as divergence."""


class NotScalar(VitaeError, ValueError):
    pass


class NonPositiveScale(VitaeError, ValueError):
    pass


class NonPositiveVariance(VitaeError, ValueError):
    pass


class DegenerateBasis(VitaeError, ValueError):
    pass


class OutOfDomain(VitaeError, ValueError):
    pass


class UnsupportedInverse(VitaeError, ValueError):
    pass


class BadMagic(VitaeError, ValueError):
    pass


class TruncatedFile(VitaeError, ValueError):
    pass


class EmptyTrainSet(VitaeError, ValueError):
    pass


class DegenerateFactor(VitaeError, ValueError):
    pass


class AllZeroImportance(VitaeError, ValueError):
    pass


class Diverged(VitaeError, RuntimeError):
    """Training hit a non-finite loss or gradient. ``log`` keeps the partial history."""

    def __init__(self, message, log=None, epoch=None):
        super().__init__(message)
        self.log = log if log is not None else []
        self.epoch = epoch
