"""Exception hierarchy shared by every module."""


class InBoxError(Exception):
    pass


class ContractError(InBoxError, ValueError):
    """A precondition of an operation was violated (shapes, empty inputs, zero counts)."""


class InvalidValueError(InBoxError, ValueError):
    """Non-finite numbers reached a kernel."""


class ParseError(InBoxError, ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class RangeError(InBoxError, IndexError):
    pass


class SamplingError(InBoxError, RuntimeError):
    pass


class CorruptCheckpointError(InBoxError, ValueError):
    pass


class DivergedStepError(InBoxError, FloatingPointError):
    pass


class ValidationError(InBoxError, ValueError):
    """Dataset counts disagree with an expected manifest."""
