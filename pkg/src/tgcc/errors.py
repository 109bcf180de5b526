"""Exception hierarchy shared by every module."""


class TgccError(Exception):
    """Base class for all library errors."""


class StructuralError(TgccError, ValueError):
    """Input has the wrong shape or violates a structural invariant."""


class CapacityError(TgccError):
    """Graph is too large for dense eigendecomposition."""


class NumericError(TgccError, ArithmeticError):
    """A computation overflowed or produced non-finite values."""


class StateError(TgccError, RuntimeError):
    """An optimizer state machine was advanced past its horizon."""


class ProtocolError(TgccError, ValueError):
    """Evaluation protocol cannot run with the given inputs."""


class BundleError(TgccError):
    """On-disk bundle is missing, malformed or inconsistent."""

    code = "bundle_error"


class MissingFileError(BundleError):
    code = "missing_file"


class HeaderMismatchError(BundleError):
    code = "header_mismatch"


class IndexRangeError(BundleError):
    code = "index_out_of_range"


class RawImportError(BundleError):
    """A raw dataset file could not be parsed."""

    code = "import_error"
