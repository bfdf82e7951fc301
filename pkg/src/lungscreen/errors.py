"""Exception and warning types raised across the pipeline."""


class LungScreenError(Exception):
    """Base class for all pipeline errors."""


# ingest
class UnsupportedEncoding(LungScreenError):
    pass


class MissingAttribute(LungScreenError):
    pass


class InconsistentSeries(LungScreenError):
    pass


class MalformedHeader(LungScreenError):
    pass


class SizeMismatch(LungScreenError):
    pass


class DuplicateInstanceNumber(UserWarning):
    """Two slices share an Instance Number; ordering fell back to axial position."""


# qc / fingerprint
class TooFewSlices(LungScreenError):
    pass


class LengthMismatch(LungScreenError, ValueError):
    pass


# encode / pyramid
class IndexOutOfRange(LungScreenError, IndexError):
    pass


class DetectionFailed(LungScreenError):
    pass


class SphereOutOfBounds(LungScreenError, ValueError):
    pass


class OverlapNotAllowed(LungScreenError, ValueError):
    pass


class NoduleOutsideExtent(LungScreenError, ValueError):
    pass


# gbdt
class DimensionMismatch(LungScreenError, ValueError):
    pass


class MalformedModel(LungScreenError):
    pass


class DegenerateLabels(UserWarning):
    """Training labels contain a single class; a constant model was returned."""


# metrics
class EmptyCounts(LungScreenError, ValueError):
    pass


class UndefinedMetric(LungScreenError, ArithmeticError):
    pass


class SingleClass(LungScreenError, ValueError):
    pass


class NoPositives(LungScreenError, ValueError):
    pass
