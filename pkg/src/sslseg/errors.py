"""Exception hierarchy shared by every sslseg module.

The CLI maps these onto exit codes: configuration problems exit with 1,
I/O and file-format problems exit with 2.
"""


class SslsegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SslsegError, ValueError):
    """Invalid hyperparameter, key, or missing required input."""


class DimensionError(SslsegError, ValueError):
    """Tensor shapes do not fit together."""


class DomainError(SslsegError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericsError(SslsegError, FloatingPointError):
    """A non-finite value (NaN or inf) was produced."""


class GeometryError(SslsegError, ValueError):
    """Spatial transform cannot be carried out (e.g. crop larger than image)."""


class BatchSizeError(SslsegError, ValueError):
    """Too few elements per channel to compute batch statistics."""


class LabelDomainError(SslsegError, ValueError):
    """Label value is neither a valid class index nor the ignore index."""


class FormatError(SslsegError):
    """Malformed file on disk.

    Carries the offending path and, where meaningful, a byte offset.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = ""
        if path is not None:
            where = f" [{path}" + (f" @ byte {offset}" if offset is not None else "") + "]"
        super().__init__(message + where)
