"""Exception hierarchy shared by all cryptorec modules."""


class CryptoRecError(Exception):
    """Base class for every error raised by this package."""


class EmptyDataset(CryptoRecError):
    pass


class InvalidRating(CryptoRecError):
    pass


class ShapeError(CryptoRecError, ValueError):
    pass


class DivergedError(CryptoRecError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class ParseError(CryptoRecError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EmptyEvalError(CryptoRecError):
    pass


class ParamError(CryptoRecError, ValueError):
    pass


class RangeError(CryptoRecError, OverflowError):
    """A plaintext does not fit (or would not fit) the message space."""


class KeyMismatch(CryptoRecError):
    pass


class ScaleMismatch(CryptoRecError):
    pass


class NoiseExhausted(CryptoRecError):
    """An RLWE ciphertext has no noise budget left to decrypt correctly."""


class ItemMapError(CryptoRecError, KeyError):
    pass


class FrameError(CryptoRecError):
    """Malformed wire frame; ``offset`` is the byte position of the fault."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"at byte {offset}: {message}")


class ProtocolError(CryptoRecError):
    """The peer sent an ERROR frame or an unexpected message."""

    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(f"error {code}: {message}")


class VersionMismatch(FrameError):
    """The frame declares a protocol version this build does not speak."""


class ConnectError(CryptoRecError, ConnectionError):
    """The server could not be reached or dropped the connection."""
