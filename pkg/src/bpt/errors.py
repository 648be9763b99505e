"""Exception hierarchy shared by every bpt module."""


class BPTError(Exception):
    """Base class for all library errors."""


class ShapeError(BPTError, ValueError):
    pass


class ConvergenceError(BPTError, ArithmeticError):
    pass


class NotPSDError(BPTError, ValueError):
    pass


class ConfigError(BPTError, ValueError):
    pass


class PlacementError(ConfigError):
    pass


class SizeError(BPTError, ValueError):
    pass


class FormatError(BPTError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateSampleError(BPTError, ValueError):
    pass


class FitError(BPTError, ValueError):
    pass


class EmptySampleError(BPTError, ValueError):
    pass


class DivergenceError(BPTError, ArithmeticError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class EquivalenceError(BPTError, ArithmeticError):
    def __init__(self, deviation, tol):
        super().__init__(f"folded and unfolded logits differ: max relative deviation {deviation:.3e} > {tol:.1e}")
        self.deviation = deviation
        self.tol = tol
