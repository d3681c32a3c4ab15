"""Exception hierarchy shared by every module."""


class AutoPruneError(Exception):
    """Base class for all library errors."""


# bundle / corpus I/O
class MissingManifest(AutoPruneError):
    pass


class UnknownManifestVersion(AutoPruneError):
    pass


class ShapeMismatch(AutoPruneError):
    pass


class NonFiniteTensor(AutoPruneError):
    pass


class IoFailure(AutoPruneError):
    pass


class EmptyCorpus(AutoPruneError):
    pass


class MalformedRecord(AutoPruneError):
    pass


class TokenOutOfRange(AutoPruneError):
    pass


# statistics / allocation
class SingularGram(AutoPruneError):
    pass


class InvalidContrastCap(AutoPruneError):
    pass


class InvalidSparsity(AutoPruneError):
    pass


# metric language
class MetricSyntaxError(AutoPruneError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class MetricShapeError(AutoPruneError):
    def __init__(self, message, subexpression=None):
        super().__init__(message if subexpression is None else f"{message}: {subexpression}")
        self.subexpression = subexpression


class DimensionMismatch(AutoPruneError):
    pass


class MissingCalibration(AutoPruneError):
    pass


# masking
class GroupMisaligned(AutoPruneError):
    pass


# evaluation
class WindowTooLong(AutoPruneError):
    pass


class InsufficientCorpus(AutoPruneError):
    pass


# search
class MissingPlaceholder(AutoPruneError):
    pass


class UnparseableCandidate(AutoPruneError):
    pass


class GeneratorFailure(AutoPruneError):
    pass


class NoSuccessfulCandidates(AutoPruneError):
    pass


class SearchExhausted(AutoPruneError):
    def __init__(self, message, graph=None):
        super().__init__(message)
        self.graph = graph


class ConfigError(AutoPruneError):
    pass
