"""Exception types raised across the package."""


class MotionNodesError(Exception):
    """Base class for every error raised by this package."""


class NonUnitInput(MotionNodesError, ValueError):
    pass


class DegenerateBlend(MotionNodesError, ArithmeticError):
    pass


class OutOfRange(MotionNodesError, ValueError):
    pass


class RankDeficient(MotionNodesError, ArithmeticError):
    pass


class InsufficientNodes(MotionNodesError, ValueError):
    pass


class EmptyCandidates(MotionNodesError, ValueError):
    pass


class TargetNotReached(MotionNodesError):
    """Compression ran out of iterations above the target count.

    ``final_count`` and ``result`` carry what was produced so callers can
    still use the (too large) node set.
    """

    def __init__(self, final_count, target_count, result=None):
        super().__init__(
            f"compression stopped at {final_count} nodes, target was {target_count}"
        )
        self.final_count = final_count
        self.target_count = target_count
        self.result = result


class NonPositiveDepth(MotionNodesError, ValueError):
    pass


class BehindCamera(MotionNodesError, ValueError):
    pass


class InvalidConfig(MotionNodesError, ValueError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.message = message
        self.line = line
        self.path = path


class SpanMismatch(MotionNodesError, ValueError):
    pass


class NonFiniteLoss(MotionNodesError, ArithmeticError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class FormatError(MotionNodesError, ValueError):
    """A file is malformed or carries an unsupported format_version."""
