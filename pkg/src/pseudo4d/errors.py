"""Exception types shared across the package."""


class Pseudo4DError(Exception):
    """Base class for all package-specific errors."""


class ManifestError(Pseudo4DError):
    """Raised when a serialized artifact cannot be parsed.

    Carries ``offset``, the byte position where parsing failed (or None
    when the failure is not positional, e.g. a short read).
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SceneValidationError(Pseudo4DError):
    """Raised when scene data violates a structural invariant."""


class EditorError(Pseudo4DError):
    """Raised when a frame editor rejects or fails a request."""


class UnknownInstructionError(EditorError):
    """Raised for instruction ids absent from the registry."""


class PipelineError(Pseudo4DError):
    """Raised when a pipeline stage fails; the message names the stage."""
