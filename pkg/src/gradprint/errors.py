"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line front end can map
error classes to stable process exit statuses.
"""


class GradprintError(Exception):
    exit_code = 1


# -- file format ------------------------------------------------------------

class FormatError(GradprintError):
    exit_code = 4


class TruncatedFile(FormatError):
    pass


class MalformedHeader(FormatError):
    pass


class OffsetOutOfRange(FormatError):
    pass


class UnknownTensor(FormatError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnsupportedDType(FormatError):
    def __init__(self, dtype: str):
        super().__init__(f"unsupported dtype {dtype!r}")
        self.dtype = dtype


class DuplicateName(FormatError):
    pass


class ShapeMismatch(FormatError):
    pass


# -- shard merging ----------------------------------------------------------

class MergeError(GradprintError):
    exit_code = 5


class MissingIndexEntry(MergeError):
    pass


class DuplicateTensorAcrossShards(MergeError):
    pass


class NoShardsFound(MergeError):
    pass


# -- adapters ---------------------------------------------------------------

class AdapterError(GradprintError):
    exit_code = 6


class OrphanLoraTensor(AdapterError):
    pass


class MissingConfigKey(AdapterError):
    pass


class TargetNotFound(AdapterError):
    pass


class ShapeIncompatible(AdapterError):
    pass


# -- numerics ---------------------------------------------------------------

class AnalysisError(GradprintError):
    exit_code = 7


class DimensionMismatch(AnalysisError, ValueError):
    pass


class DegenerateOutput(AnalysisError):
    pass


class MissingWeight(AnalysisError, ValueError):
    pass


class NoEligibleLayers(AnalysisError):
    pass


class EmptyInput(AnalysisError, ValueError):
    pass


class InsufficientSamples(AnalysisError, ValueError):
    pass


class EmptyBases(AnalysisError, ValueError):
    pass


class TooFewPoints(AnalysisError, ValueError):
    pass
