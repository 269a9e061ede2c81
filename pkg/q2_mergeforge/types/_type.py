# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
from qiime2.core.type import SemanticType

Checkpoint = SemanticType("Checkpoint")
TaskVector = SemanticType("TaskVector")
Judgments = SemanticType("Judgments")
