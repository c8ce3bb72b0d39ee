"""Exception hierarchy shared by every module."""


class PPMarlError(Exception):
    pass


# numeric substrate
class RangeOverflow(PPMarlError, ValueError):
    pass


class NonFinite(PPMarlError, ValueError):
    pass


class ZeroInverse(PPMarlError, ZeroDivisionError):
    pass


class DuplicatePoint(PPMarlError, ValueError):
    pass


# shamir
class BadThreshold(PPMarlError, ValueError):
    pass


class InsufficientShares(PPMarlError, ValueError):
    pass


class MixedDegree(PPMarlError, ValueError):
    pass


class IndexMismatch(PPMarlError, ValueError):
    pass


class ReusedRandomness(PPMarlError, RuntimeError):
    pass


class InsufficientParties(PPMarlError, ValueError):
    pass


# 2pc backend
class TripleExhausted(PPMarlError, RuntimeError):
    pass


class DealerUnavailable(PPMarlError, RuntimeError):
    pass


class DimMismatch(PPMarlError, ValueError):
    pass


# transport
class TransportError(PPMarlError):
    pass


class Truncated(TransportError):
    pass


class BadType(TransportError):
    pass


class SeqGap(TransportError):
    pass


class FrameTooLarge(TransportError):
    pass


class DimHeaderMismatch(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class ChannelDesync(TransportError):
    pass


# nn / gadgets
class TraceMismatch(PPMarlError, ValueError):
    pass


class ShapeMismatch(PPMarlError, ValueError):
    pass


class SideConflict(PPMarlError, ValueError):
    pass


# environment / rl
class NegativeState(PPMarlError, RuntimeError):
    pass


class EmptyHistory(PPMarlError, ValueError):
    pass


class BufferTooSmall(PPMarlError, ValueError):
    pass


class IndexOutOfRange(PPMarlError, IndexError):
    pass


# experiment driver
class ParseError(PPMarlError, ValueError):
    pass


class ValidationError(PPMarlError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class EmptySeries(PPMarlError, ValueError):
    pass


class LengthMismatch(PPMarlError, ValueError):
    pass
