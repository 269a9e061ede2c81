# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------


class MergeForgeError(ValueError):
    """Base class for every error raised by q2-mergeforge."""


class MalformedHeader(MergeForgeError):
    pass


class OffsetOverlap(MergeForgeError):
    pass


class UnknownDtype(MergeForgeError):
    pass


class IoFailure(MergeForgeError):
    pass


class InvariantViolation(MergeForgeError):
    pass


class IncompatibleArchives(MergeForgeError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"Archives are not compatible: {report.summary()}")


class ZeroWeightSum(MergeForgeError):
    pass


class BadCoefficient(MergeForgeError):
    pass


class UnknownTensor(MergeForgeError):
    pass


class BadGrid(MergeForgeError):
    pass


class DegenerateBaseline(MergeForgeError):
    pass


class EmptySet(MergeForgeError):
    pass


class MissingBaseline(MergeForgeError):
    pass


class UnreadableFile(MergeForgeError):
    pass


class MissingScores(MergeForgeError):
    pass


class RecipeInvalid(MergeForgeError):
    def __init__(self, field: str, reason: str = ""):
        self.field = field
        message = f'RecipeInvalid("{field}")'
        if reason:
            message = f"{message}: {reason}"
        super().__init__(message)
