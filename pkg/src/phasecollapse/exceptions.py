"""Exception hierarchy shared by all modules."""


class PhaseCollapseError(Exception):
    """Base class for errors raised by this package."""


class ParameterError(PhaseCollapseError, ValueError):
    """An argument is outside its valid domain."""


class GridError(ParameterError):
    """A filter grid size is invalid (e.g. even)."""


class SizeError(PhaseCollapseError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateInputError(PhaseCollapseError, ValueError):
    """Input carries no information (zero filter, empty batch, ...)."""


class ConfigError(PhaseCollapseError, ValueError):
    """Network or training configuration is inconsistent.

    ``layer`` holds the offending layer index when one is known.
    """

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class DomainError(PhaseCollapseError, TypeError):
    """Input has the wrong numeric domain (complex where real is required)."""


class DivergenceError(PhaseCollapseError, FloatingPointError):
    """Training produced a non-finite loss or gradient.

    ``layer`` names where the non-finite value appeared and ``checkpoint``
    points to the last good checkpoint on disk, if one was written.
    """

    def __init__(self, message, layer=None, checkpoint=None):
        if layer is not None:
            message = f"{message} (at {layer})"
        super().__init__(message)
        self.layer = layer
        self.checkpoint = checkpoint


class FormatError(PhaseCollapseError, ValueError):
    """A file does not follow its binary or text format.

    ``offset`` is the byte (or line) offset where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset
