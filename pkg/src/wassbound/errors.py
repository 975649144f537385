"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Arguments violate an operation's preconditions."""


class NumericalFailureError(ArithmeticError):
    """A log-density, gradient or transport kernel became non-finite."""


class StepSizeTooLargeError(InvalidInputError):
    """The ULA recursion matrix has operator norm >= 1, so no limiting law exists."""


class ApproximationFailedError(RuntimeError):
    """The negative Hessian at the located mode is not positive definite."""


class ContractionNotDetectedError(RuntimeError):
    """The estimated one-step contraction factor is not below one.

    The partially filled report is attached so callers can still log it.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ChainStepError(RuntimeError):
    """A step failed inside a coupled run; records where."""

    def __init__(self, chain, step, cause):
        super().__init__(f"chain {chain}, step {step}: {cause}")
        self.chain = chain
        self.step = step
        self.cause = cause
