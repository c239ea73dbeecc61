"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """An input had the wrong shape or lay outside the allowed domain."""


class UsageError(RuntimeError):
    """An operation was called in a state where it is not allowed."""


class DegenerateBaselineError(ValueError):
    """A control-variate statistic was requested from zero-variance samples."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(ValueError):
    """A configuration violated one or more invariants.

    ``violations`` lists every problem found, not just the first.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
