"""Exception hierarchy shared by all modules."""


class BilliardError(Exception):
    """Base class for every error raised by this package."""


class OverlappingScatterers(BilliardError):
    pass


class InfiniteHorizon(BilliardError):
    pass


class GrazingInput(BilliardError):
    pass


class NoCollisionWithinHorizon(BilliardError):
    pass


class GrazingOrbit(BilliardError):
    pass


class BudgetExceeded(BilliardError):
    """Raised (or attached to a result) when a refinement budget runs out."""


class NotConverged(BilliardError):
    pass


class OutOfGrid(BilliardError):
    pass


class NoSignChange(BilliardError):
    pass


class NonMonotoneEstimate(BilliardError):
    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class BadTheta(BilliardError):
    pass


class ResolutionLoss(BilliardError):
    pass


class PieceExplosion(BilliardError):
    pass


class EmptyBox(BilliardError):
    pass


class NoConvergence(BilliardError):
    pass


class DegenerateEigenvector(BilliardError):
    pass


class NotAtRoot(BilliardError):
    pass


class ConfigInvalid(BilliardError):
    pass


class CacheCorrupt(BilliardError):
    pass
