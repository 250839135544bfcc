"""Exception types shared across the emulator."""


class PipeCnnError(Exception):
    pass


class NonIntegralOutputDim(PipeCnnError):
    """(W - K + 2P) is not divisible by the stride."""

    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


class ShapeMismatch(PipeCnnError):
    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


class NetworkValidationError(PipeCnnError):
    """Aggregate of per-layer validation failures."""

    def __init__(self, errors):
        super().__init__("; ".join(str(e) for e in errors))
        self.errors = errors


class StreamUnderrun(PipeCnnError):
    pass


class StreamOverrun(PipeCnnError):
    pass


class PlanMismatch(PipeCnnError):
    pass


class ChannelClosed(PipeCnnError):
    pass


class DeadlockError(PipeCnnError):
    pass


class IncompleteRow(PipeCnnError):
    pass


class InvalidRange(PipeCnnError):
    pass


class NoFeasiblePoint(PipeCnnError):
    pass


class ParseError(PipeCnnError):
    pass


class BadMagic(ParseError):
    pass


class DimMismatch(ParseError):
    pass


class ShortRead(ParseError):
    pass
