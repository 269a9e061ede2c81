# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import itertools
import json

from qiime2.core.exceptions import ValidationError
from qiime2.plugin import model

from .._errors import MergeForgeError
from ..evalmetrics import _parse_record
from ..tensorio import read_archive, read_header


class TensorArchiveFormat(model.BinaryFileFormat):
    def _validate_(self, level):
        try:
            if level == "min":
                read_header(str(self))
            else:
                read_archive(str(self), lazy=True)
        except MergeForgeError as e:
            raise ValidationError(f"Not a valid tensor archive: {e}")


class JudgmentsFormat(model.TextFileFormat):
    """One JSON judgment object per line."""

    def _validate_(self, level):
        with open(str(self), encoding="utf-8") as fh:
            lines = fh if level == "max" else itertools.islice(fh, 20)
            for lineno, line in enumerate(lines, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValidationError(f"Line {lineno} is not valid JSON: {e}")
                record, reason = _parse_record(obj, None)
                if record is None:
                    raise ValidationError(f"Line {lineno}: {reason}")


CheckpointDirFmt = model.SingleFileDirectoryFormat(
    "CheckpointDirFmt", "model.safetensors", TensorArchiveFormat
)

JudgmentsDirFmt = model.SingleFileDirectoryFormat(
    "JudgmentsDirFmt", "judgments.jsonl", JudgmentsFormat
)
