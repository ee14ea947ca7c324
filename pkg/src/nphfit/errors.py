"""Exception hierarchy shared by all nphfit modules."""


class NphError(Exception):
    """Base class for every error raised by nphfit."""


class InvalidInputError(NphError, ValueError):
    pass


class NumericOverflowError(NphError, ArithmeticError):
    pass


class ValidationError(NphError, ValueError):
    """A phase-type representation or model violates an invariant."""


class ParameterDomainError(NphError, ValueError):
    pass


class DegenerateWeightsError(NphError, ValueError):
    pass


class StateStarvationError(NphError, ArithmeticError):
    pass


class NumericError(NphError, ArithmeticError):
    """Densities or interval probabilities underflowed beyond protection."""


class ZeroProbabilityIntervalError(NumericError):
    pass


class FitFailureError(NphError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class TargetDistributionError(NphError, ValueError):
    pass


class DataError(NphError, ValueError):
    """Malformed or empty input data."""


class ModelLoadError(NphError, ValueError):
    pass
