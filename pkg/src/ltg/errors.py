"""Exception types shared across the package.

Grouped here so the CLI can map whole families to exit codes without
importing every module.
"""


class LtgError(Exception):
    """Base class for all package-specific errors."""


class ParseError(LtgError):
    """Malformed input stream. Carries the byte offset of the offending record."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class LinkError(LtgError):
    """A structure reference names a cell that does not exist."""

    def __init__(self, name: str):
        super().__init__(f"reference to undefined cell {name!r}")
        self.name = name


class CycleError(LtgError):
    """The cell reference graph contains a cycle."""

    def __init__(self, path: list[str]):
        super().__init__("reference cycle: " + " -> ".join(path))
        self.path = path


class NotFoundError(LtgError):
    """A named entity (cell, record, session) is absent."""


class RangeError(LtgError):
    """A value falls outside the representable range of its field."""


class UnsupportedGeometryError(LtgError):
    """Geometry outside the Manhattan subset this pipeline handles."""


class EmptyRasterError(LtgError):
    """Rasterization target contains no drawable geometry."""


class DimError(LtgError):
    """Array dimensions do not match what an operation requires."""


class FormatError(LtgError):
    """A binary container has a bad magic number, version, or structure."""


class ConfigError(LtgError):
    """Invalid configuration value."""


class ParamError(LtgError):
    """A generator parameter is missing or outside its declared range."""

    def __init__(self, name: str, message: str):
        super().__init__(f"parameter {name!r}: {message}")
        self.name = name


class RegistryError(LtgError):
    """Class registry inconsistency (unknown label, duplicate index)."""


class DataError(LtgError):
    """A dataset is unusable for the requested operation."""


class IoError(LtgError):
    """A required file or directory is missing or unreadable."""


class BatchError(LtgError):
    """A batch is too small for an operation that needs batch statistics."""


class StateError(LtgError):
    """An operation is illegal in the current workflow state."""
