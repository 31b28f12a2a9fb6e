"""Exception hierarchy. Each class carries a machine-readable category used by the CLI."""


class TumorPipeError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(TumorPipeError, ValueError):
    category = "config"
    exit_code = 5


class GeometryMismatchError(TumorPipeError, ValueError):
    category = "geometry-mismatch"
    exit_code = 4


class MissingInputError(TumorPipeError, FileNotFoundError):
    category = "missing-input"
    exit_code = 3


class NiftiFormatError(TumorPipeError, ValueError):
    category = "format"
    exit_code = 6


class SchemaError(NiftiFormatError):
    """A label code in a file is not part of the configured label schema."""

    category = "label-schema"
    exit_code = 7


class OutputError(TumorPipeError, OSError):
    category = "io"
    exit_code = 8
