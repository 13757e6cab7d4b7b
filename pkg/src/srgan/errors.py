"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI returns for it.
"""


class SRError(Exception):
    exit_code = 1


class InvalidArgument(SRError, ValueError):
    exit_code = 10


class ShapeMismatch(SRError, ValueError):
    exit_code = 11


class ImageTooSmall(SRError, ValueError):
    exit_code = 12


class DegenerateBatch(SRError, ValueError):
    exit_code = 13


class DomainError(SRError, ValueError):
    exit_code = 14


class DataError(SRError):
    exit_code = 15


class IoError(SRError, OSError):
    exit_code = 16


class FormatError(SRError):
    exit_code = 17


class MissingGradient(SRError):
    exit_code = 18


class ProvenanceError(SRError):
    exit_code = 19
