"""Exception types shared across the package."""


class PairMotionError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(PairMotionError, ValueError):
    pass


class BadArgument(PairMotionError, ValueError):
    pass


class OutOfRange(PairMotionError, ValueError):
    pass


class DegenerateRotation(PairMotionError, ValueError):
    pass


class NotARotation(PairMotionError, ValueError):
    pass


class EmptyPrompt(PairMotionError, ValueError):
    pass


class BackendUnavailable(PairMotionError, RuntimeError):
    pass


class NonFiniteLoss(PairMotionError, FloatingPointError):
    pass


class DatasetTooSmall(PairMotionError, ValueError):
    pass


class DegenerateCovariance(PairMotionError, ValueError):
    pass


class MalformedResponse(PairMotionError, ValueError):
    pass


class NotTrained(PairMotionError, RuntimeError):
    pass


class SourceUnavailable(PairMotionError, RuntimeError):
    pass


class CorruptFile(PairMotionError, IOError):
    pass
