"""Exception hierarchy.

Every error raised by the package derives from :class:`PrefAlignError`, so
callers (and the CLI) can catch one type. Most also subclass the closest
builtin so ``except ValueError`` keeps working for input problems.
"""


class PrefAlignError(Exception):
    """Base class for all package errors."""


class ConfigInvalid(PrefAlignError, ValueError):
    pass


class ZeroVector(PrefAlignError, ValueError):
    pass


class DimensionMismatch(PrefAlignError, ValueError):
    pass


class SizeMismatch(PrefAlignError, ValueError):
    pass


class EmptyBatch(PrefAlignError, ValueError):
    pass


class EmptySample(PrefAlignError, ValueError):
    pass


class NonFiniteValue(PrefAlignError, ValueError):
    pass


class UnknownAnchor(PrefAlignError, KeyError):
    pass


class TooFewInstances(PrefAlignError, ValueError):
    pass


class NonFiniteLogit(PrefAlignError, ValueError):
    pass


class JudgeFailure(PrefAlignError, RuntimeError):
    """Wraps an error raised by a judge, with the candidate index attached."""

    def __init__(self, index, candidate_id, cause):
        super().__init__(f"judge failed on candidate {index} ({candidate_id!r}): {cause}")
        self.index = index
        self.candidate_id = candidate_id


class CacheCorrupt(PrefAlignError, ValueError):
    pass


class CacheMiss(PrefAlignError, KeyError):
    pass


class KTooLarge(PrefAlignError, ValueError):
    pass


class MissingCaption(PrefAlignError, KeyError):
    pass


class EmptyScores(PrefAlignError, ValueError):
    pass


class TooFewCandidates(PrefAlignError, ValueError):
    pass


class NonPositiveScale(PrefAlignError, ValueError):
    pass


# the contrastive temperature is the scale most often misconfigured
NonPositiveTau = NonPositiveScale


class PositiveMissingFromPool(PrefAlignError, KeyError):
    pass


class IndexOutOfRange(PrefAlignError, IndexError):
    pass


class MissingDirection(PrefAlignError, ValueError):
    pass


class LambdaOutOfRange(PrefAlignError, ValueError):
    pass


class NonFiniteLoss(PrefAlignError, FloatingPointError):
    pass


class NotEnoughDuplicatePairs(PrefAlignError, ValueError):
    pass


class MissingTruth(PrefAlignError, KeyError):
    pass


class MissingScore(PrefAlignError, KeyError):
    pass


class MissingBaseline(PrefAlignError, KeyError):
    pass


class MissingArtifact(PrefAlignError, FileNotFoundError):
    pass
