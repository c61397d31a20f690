"""Exception types shared by all modules.

The CLI maps them onto exit codes: validation 1, infeasibility 2,
internal assertion 3.
"""


class ValidationError(ValueError):
    """Bad input: malformed cloud, violated precondition, bad flag."""

    exit_code = 1

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class InfeasibleError(RuntimeError):
    """A parameter search or retry loop found nothing admissible."""

    exit_code = 2

    def __init__(self, message, binding=None):
        super().__init__(message)
        self.binding = binding


class InternalError(AssertionError):
    """A property that the construction guarantees did not hold."""

    exit_code = 3

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness
