"""Exception hierarchy shared by all modules."""


class MMPGError(Exception):
    """Base class for every error raised by this package."""


class DataError(MMPGError):
    """Input data is malformed or inconsistent (CLI exit code 2)."""


class MalformedRecord(DataError):
    pass


class MissingBackbone(DataError):
    pass


class EmptyChain(DataError):
    pass


class UnknownResidue(DataError):
    pass


class DegenerateGeometry(MMPGError):
    pass


class OutOfRange(MMPGError):
    pass


class BadMagic(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class ZeroEmbedding(MMPGError):
    pass


class NotScalar(MMPGError):
    pass


class LabelArityMismatch(DataError):
    pass


class ConfigInvalid(MMPGError):
    pass
