# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
from ._format import (
    CheckpointDirFmt,
    JudgmentsDirFmt,
    JudgmentsFormat,
    TensorArchiveFormat,
)
from ._type import Checkpoint, Judgments, TaskVector

__all__ = [
    "Checkpoint",
    "TaskVector",
    "Judgments",
    "TensorArchiveFormat",
    "CheckpointDirFmt",
    "JudgmentsFormat",
    "JudgmentsDirFmt",
]
