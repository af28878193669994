"""Exception hierarchy shared by all modules."""


class AniheatError(Exception):
    """Base class for every error raised by the package."""


class NotPositiveDefinite(AniheatError):
    pass


class NoConvergence(AniheatError):
    pass


class QuadratureFailure(AniheatError):
    pass


class DegenerateInterval(AniheatError):
    pass


class InvalidExponent(AniheatError, ValueError):
    pass


class SpectralLeakage(AniheatError):
    pass


class NonUniformTimes(AniheatError):
    pass


class OrderTooHigh(AniheatError, ValueError):
    pass


class InadmissibleExponents(AniheatError, ValueError):
    pass


class ZeroAccumulation(AniheatError):
    pass


class NotNormalizable(AniheatError):
    pass


class DegenerateFit(AniheatError):
    pass


class GridMismatch(AniheatError, ValueError):
    pass


class NetMemberFailure(AniheatError):
    """A single epsilon member of a net failed; ``eps`` records which one."""

    def __init__(self, eps, cause):
        super().__init__(f"net member eps={eps:.6g} failed: {cause}")
        self.eps = eps
        self.cause = cause


class FieldFormatError(AniheatError, ValueError):
    pass
