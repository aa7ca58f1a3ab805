"""Exception hierarchy shared by every module."""


class PoiVerifyError(Exception):
    """Base class for all package errors."""


class ParameterError(PoiVerifyError, ValueError):
    """An argument is out of range or otherwise invalid."""


class IntegrityError(PoiVerifyError, ValueError):
    """Input data violates a structural invariant (duplicate ids, bad norms...)."""


class FormatError(PoiVerifyError, ValueError):
    """Malformed encoded data: geohash strings, binary blobs, JSONL lines."""


class StateError(PoiVerifyError, RuntimeError):
    """An object is not in a usable state (empty lexicon, empty forest)."""


class DegenerateEmbeddingError(PoiVerifyError, ArithmeticError):
    """A vector that must be normalised has zero norm."""


class DependencyError(PoiVerifyError, RuntimeError):
    """A required upstream artifact is missing."""

    def __init__(self, artifact, message=None):
        self.artifact = artifact
        super().__init__(message or f"missing artifact: {artifact}")


class CorruptionError(PoiVerifyError, RuntimeError):
    """An artifact on disk does not match its recorded content hash."""

    def __init__(self, artifact, message=None):
        self.artifact = artifact
        super().__init__(message or f"artifact content hash mismatch: {artifact}")
