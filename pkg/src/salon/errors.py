"""Exception and warning types shared across the package."""


class SalonError(Exception):
    """Base class for all pipeline errors."""


class InputError(SalonError):
    """Missing or unparseable input file. CLI exit code 2."""


class CanvasError(SalonError):
    """Grids that must share one canvas resolution do not."""


class SchemaError(SalonError):
    """Latent or noise shapes do not match the generator schema."""


class InvalidKeypointsError(SalonError):
    """Keypoint set is degenerate or incomplete."""


class EmptyRegionError(SalonError):
    """A region reduction (mean color, metrics) got an empty region."""


class UnsupportedBackendError(SalonError):
    """The generator backend lacks a required capability."""


class NumericalError(SalonError):
    """Optimization produced a non-finite loss. CLI exit code 3."""


class SalonWarning(UserWarning):
    """Base class for fallback warnings recorded in run records."""


class FallbackWarning(SalonWarning):
    """A documented fallback path was taken (empty region, failed segmenter)."""
