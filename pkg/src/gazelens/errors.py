"""Exception types raised across the package.

Every domain error derives from :class:`GazeLensError` so the CLI can map
them to exit code 1 in one place.
"""


class GazeLensError(Exception):
    """Base class for all domain errors."""


# ingest
class MalformedRow(GazeLensError, ValueError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"malformed row at line {line_no}" + (f": {reason}" if reason else ""))

    def __reduce__(self):  # survive pickling across worker processes
        return type(self), (self.line_no, self.reason)


class NonMonotonicTime(GazeLensError, ValueError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"timestamp decreases at line {line_no}")

    def __reduce__(self):
        return type(self), (self.line_no,)


class DuplicateTrialId(GazeLensError, ValueError):
    pass


class SchemaVersionMismatch(GazeLensError):
    pass


class StorageError(GazeLensError, OSError):
    """Unreadable, unwritable or truncated file."""


# fixdet
class ZeroTimeDelta(GazeLensError, ValueError):
    pass


class TooFewSamples(GazeLensError, ValueError):
    pass


# render
class BelowFloor(GazeLensError, ValueError):
    pass


class IndexOutOfRange(GazeLensError, IndexError):
    pass


class EmptyScanpath(GazeLensError, ValueError):
    pass


# features / baselines
class TooFewFixations(GazeLensError, ValueError):
    pass


class SingleClassInput(GazeLensError, ValueError):
    pass


class NonFiniteFeature(GazeLensError, ValueError):
    pass


# nn
class ShapeMismatch(GazeLensError, ValueError):
    pass


class NonFiniteActivation(GazeLensError, FloatingPointError):
    pass


class MissingCache(GazeLensError, RuntimeError):
    pass


class NanLoss(GazeLensError, FloatingPointError):
    pass


class EmptyDataset(GazeLensError, ValueError):
    pass


class HeaderMismatch(GazeLensError, ValueError):
    pass


# gradcam
class UntrainedModel(GazeLensError, RuntimeError):
    pass


class EmptySet(GazeLensError, ValueError):
    pass


class DimMismatch(GazeLensError, ValueError):
    pass


# eval
class EmptyClass(GazeLensError, ValueError):
    pass
