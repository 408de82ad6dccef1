"""Exception hierarchy.

Validation problems derive from :class:`ValidationError` (a ``ValueError``);
filesystem problems derive from :class:`StorageError` (an ``OSError``).  The
CLI maps the first family to exit code 1 and the second to exit code 2.
"""


class ValidationError(ValueError):
    """Input violates a type invariant or an operation precondition."""


class ManifestError(ValidationError):
    """Manifest JSON is malformed or inconsistent."""


class ShapeError(ValidationError):
    """A tensor shape disagrees with the declared dimensions."""


class OffsetError(ValidationError):
    """Tensor byte offsets are not contiguous."""


class TruncationError(ValidationError):
    """Binary blob is shorter (or longer) than the manifest requires."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class NonFiniteError(ValidationError):
    """A tensor holds NaN or Inf."""


class TokenRangeError(ValidationError):
    """A token id is outside ``[0, vocab)``."""


class StageError(ValidationError):
    """A pruning pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class StorageError(OSError):
    """Reading or writing a file failed."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path
