"""Exception types shared across the package."""


class FlowIVError(Exception):
    pass


class ValidationError(FlowIVError, ValueError):
    """Bad user input: malformed files, wrong shapes, degenerate data."""


class NumericalError(FlowIVError, ArithmeticError):
    """A computation produced NaN/Inf or could not proceed numerically."""


class NonFiniteError(NumericalError):
    def __init__(self, msg, segments=(), row=None):
        super().__init__(msg)
        self.segments = list(segments)
        self.row = row


class DivergenceError(NumericalError):
    def __init__(self, msg, phase="", step=-1):
        super().__init__(msg)
        self.phase = phase
        self.step = step


class WeakInstrumentError(ValidationError):
    pass
