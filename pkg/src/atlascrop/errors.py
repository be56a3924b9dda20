"""Exception hierarchy.

Every failure raised by the package derives from :class:`AtlasCropError`, so
callers that only care about "did the pipeline fail" can catch one type.
"""


class AtlasCropError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(AtlasCropError, ValueError):
    pass


class InvariantViolation(InvalidArgumentError):
    """A value object was constructed with inconsistent fields."""


class EmptyCropError(AtlasCropError):
    def __init__(self, ranges):
        self.ranges = tuple(tuple(int(v) for v in r) for r in ranges)
        super().__init__(f"crop ranges {self.ranges} select no voxels")


class NoAnatomyFoundError(AtlasCropError):
    pass


class InternalConsistencyError(AtlasCropError):
    pass


class NumericalFailureError(AtlasCropError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(f"{message} {self.diagnostics}" if self.diagnostics else message)


class CohortTooSmallError(AtlasCropError):
    def __init__(self, n_valid, diagnostics=None):
        self.n_valid = n_valid
        self.diagnostics = list(diagnostics or [])
        super().__init__(f"only {n_valid} usable scan(s) in cohort, need at least 2")


class ScanRejectedError(AtlasCropError):
    pass


class OutsideFieldOfViewError(AtlasCropError):
    pass


class EmptyRegionError(AtlasCropError):
    pass


class UndefinedNCCError(AtlasCropError):
    pass


class FileFormatError(AtlasCropError):
    """Base for problems with on-disk data."""


class BadMagicError(FileFormatError):
    pass


class UnsupportedDatatypeError(FileFormatError):
    def __init__(self, code):
        self.code = code
        super().__init__(f"unsupported NIfTI datatype code {code}")


class UnsupportedFeatureError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class CorruptFileError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class MissingChannelError(FileFormatError):
    def __init__(self, class_id, class_name, path):
        self.class_id = class_id
        self.class_name = class_name
        super().__init__(f"missing channel file for class {class_id} ({class_name}): {path}")
