"""Exception types shared across the package."""


class ConeViolation(ValueError):
    """A potential left the radial plurisubharmonic cone."""

    def __init__(self, msg, index=None, value=None):
        super().__init__(msg)
        self.index = index
        self.value = value


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance.

    ``stage`` names the cascade stage (or solver) that failed and ``info``
    carries whatever the solver had at the time (last residual, etc).
    """

    def __init__(self, msg, stage=None, info=None):
        super().__init__(msg)
        self.stage = stage
        self.info = info or {}


class ConfigError(ValueError):
    """Invalid run configuration."""

    def __init__(self, msg, line=None, key=None):
        super().__init__(msg)
        self.line = line
        self.key = key
