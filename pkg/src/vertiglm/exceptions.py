"""Error taxonomy.

Every concrete error carries a distinct ``exit_code`` used by the command
line interface; the table in the README is generated from
:func:`exit_code_table`.
"""


class VertiGLMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


# data / numerics ---------------------------------------------------------

class DataError(VertiGLMError):
    exit_code = 3


class NonFinite(DataError):
    exit_code = 10


class ConstantColumn(DataError):
    exit_code = 11

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class MissingValue(DataError):
    exit_code = 12

    def __init__(self, row, column):
        super().__init__(f"missing value at row {row}, column {column!r}")
        self.row = row
        self.column = column


class UnknownColumn(DataError):
    exit_code = 13


class EmptyData(DataError):
    exit_code = 14


class ShapeMismatch(DataError):
    exit_code = 15


class DegenerateColumn(VertiGLMError):
    exit_code = 20


class SingularGram(VertiGLMError):
    exit_code = 21

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class NotConverged(VertiGLMError):
    exit_code = 22


# standard-error recovery -------------------------------------------------

class RankDeficientTrace(VertiGLMError):
    exit_code = 30


class RankAmbiguous(VertiGLMError):
    exit_code = 31


class DfExhausted(VertiGLMError):
    exit_code = 32


# attack ------------------------------------------------------------------

class NoCoefficients(VertiGLMError):
    exit_code = 40


# session / wire ----------------------------------------------------------

class ProtocolError(VertiGLMError):
    """Malformed or out-of-order message; the session is aborted."""

    exit_code = 50


class DigestMismatch(ProtocolError):
    exit_code = 51


class VersionMismatch(ProtocolError):
    exit_code = 52


class ConfigMismatch(ProtocolError):
    exit_code = 53


class PeerAbort(ProtocolError):
    exit_code = 54


class DecodeFailure(ProtocolError):
    exit_code = 55


class TransportFailure(VertiGLMError):
    exit_code = 60


class ConnectFailure(TransportFailure):
    exit_code = 61


class AuthFailure(TransportFailure):
    exit_code = 62


def exit_code_table():
    """Return ``{error class name: exit code}`` for every error type."""
    table = {}
    stack = [VertiGLMError]
    while stack:
        cls = stack.pop()
        table[cls.__name__] = cls.exit_code
        stack.extend(cls.__subclasses__())
    return dict(sorted(table.items(), key=lambda kv: kv[1]))
