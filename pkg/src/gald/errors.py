"""Exception hierarchy shared by every module in the package."""


class GaldError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(GaldError, ValueError):
    pass


class DomainError(GaldError, ValueError):
    pass


class NotScalar(GaldError, ValueError):
    pass


class InvalidSpec(GaldError, ValueError):
    pass


class DegenerateBatch(GaldError, ValueError):
    pass


class LabelOutOfRange(GaldError, ValueError):
    pass


class AllIgnored(GaldError, ValueError):
    pass


class MissingGrad(GaldError, RuntimeError):
    pass


class CorruptFile(GaldError, IOError):
    pass


class SpecInfeasible(GaldError, RuntimeError):
    pass


class NoMaskInArrangement(GaldError, ValueError):
    pass
