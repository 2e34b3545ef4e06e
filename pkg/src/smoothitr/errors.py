"""Exception hierarchy shared by the fitting, simulation and CLI layers."""


class ItrError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ItrError, ValueError):
    pass


class EmptySample(ItrError, ValueError):
    pass


class DegenerateDesign(ItrError):
    """Normal equations are singular or ill-conditioned."""


class NonConvergence(ItrError):
    pass


class ConstantColumn(ItrError, ValueError):
    pass


class NonFinite(ItrError, FloatingPointError):
    pass


class MissingReply(ItrError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"no gradient reply from site(s) {self.missing}")


class EmptySite(ItrError, ValueError):
    pass


class MissingTruth(ItrError, ValueError):
    pass


class EmptyIntersection(ItrError):
    """No test unit received the treatment the rule recommends."""


class BadShape(ItrError, ValueError):
    pass


class MaxIter(ItrError):
    pass
