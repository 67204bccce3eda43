"""Exception hierarchy shared across the package."""


class ImageRagError(Exception):
    """Base class for all package errors."""


class DataError(ImageRagError):
    """Bad input data: out-of-bounds boxes, malformed manifests, unreadable files."""


class BoundsError(DataError):
    """A box does not fit the image it is applied to."""


class ProviderError(ImageRagError):
    """An external provider (encoder, LLM, MLLM) failed or is unreachable."""


class DimensionMismatchError(ImageRagError):
    """A vector's dimension does not match the declared encoder dimension."""


class DegenerateProxyError(ImageRagError):
    """Proxy computation collapsed to a zero vector."""


class AnalysisError(ImageRagError):
    """A question could not be analyzed (provider failed and fallback unavailable)."""
