class GBlendError(Exception):
    """Base class for library errors."""


class DimensionError(GBlendError, ValueError):
    pass


class ContractError(GBlendError, RuntimeError):
    """A call violated an ordering or pairing contract (e.g. a stale cache)."""


class NumericError(GBlendError, ArithmeticError):
    pass


class WeightEstimationError(GBlendError, ValueError):
    pass


class DegenerateScenarioError(GBlendError, ValueError):
    pass
