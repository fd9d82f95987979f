"""Exception hierarchy shared by every subsystem."""


class TchError(Exception):
    """Base class for all errors raised by tchash."""


# media container
class MediaError(TchError):
    pass


class BadMagic(MediaError):
    pass


class TruncatedPayload(MediaError):
    pass


class UnsupportedVersion(MediaError):
    pass


class MediaInvalid(MediaError):
    pass


class WindowOutOfRange(MediaError, ValueError):
    pass


# numerics
class DimensionMismatch(TchError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class ZeroVector(TchError, ValueError):
    pass


class EmptyPositives(TchError, ValueError):
    pass


class EmptyInput(TchError, ValueError):
    pass


class InsufficientDataWarning(UserWarning):
    """Triplet term disabled because no negative block exists."""


# verification
class ModelHashMismatch(TchError):
    pass


class MissingRecord(TchError):
    pass


# ledger
class LedgerError(TchError):
    pass


class RecordTooLarge(LedgerError):
    pass


class Oversize(RecordTooLarge):
    pass


class NotInTurn(LedgerError):
    pass


class DuplicateUid(LedgerError):
    pass


class BadParent(LedgerError):
    pass


class BadSeal(LedgerError):
    pass


class UnauthorizedSealer(LedgerError):
    pass


class RecentlySealed(UnauthorizedSealer):
    """Sealer signed one of the previous ``len(authorities) // 2`` blocks."""


class BadRoot(LedgerError):
    pass


class BadTimestamp(LedgerError):
    pass


class DisjointGenesis(LedgerError):
    pass


class NotFound(LedgerError, KeyError):
    pass


class Unauthorized(LedgerError):
    pass


class FrameError(TchError):
    """Malformed wire frame; the connection carrying it is dropped."""
