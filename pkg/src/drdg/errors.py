"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or input data."""


class ContractViolation(ValueError):
    """A shape or argument contract was broken by the caller."""


class TrainingAborted(RuntimeError):
    """Raised when a training step produced a non-finite loss.

    ``diagnostics`` carries the step index, loss values, weight statistics and
    parameter norms captured at the time of the failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
