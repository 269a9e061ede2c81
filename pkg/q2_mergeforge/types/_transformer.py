# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import json

import pandas as pd

from ..evalmetrics import JudgmentSet, ingest_judgments
from ..mergecore import TaskVector
from ..plugin_setup import plugin
from ..tensorio import TensorArchive, read_archive, write_archive
from . import CheckpointDirFmt, JudgmentsDirFmt

ARCHIVE_NAME = "model.safetensors"
JUDGMENTS_NAME = "judgments.jsonl"


@plugin.register_transformer
def _1(data: CheckpointDirFmt) -> TensorArchive:
    return read_archive(data.path / ARCHIVE_NAME, lazy=True)


@plugin.register_transformer
def _2(data: TensorArchive) -> CheckpointDirFmt:
    ff = CheckpointDirFmt()
    write_archive(data, ff.path / ARCHIVE_NAME)
    return ff


@plugin.register_transformer
def _3(data: CheckpointDirFmt) -> TaskVector:
    return TaskVector.from_archive(read_archive(data.path / ARCHIVE_NAME))


@plugin.register_transformer
def _4(data: TaskVector) -> CheckpointDirFmt:
    ff = CheckpointDirFmt()
    write_archive(data.to_archive(), ff.path / ARCHIVE_NAME)
    return ff


@plugin.register_transformer
def _5(data: JudgmentsDirFmt) -> JudgmentSet:
    return ingest_judgments(data.path / JUDGMENTS_NAME)


@plugin.register_transformer
def _6(data: JudgmentsDirFmt) -> pd.DataFrame:
    return ingest_judgments(data.path / JUDGMENTS_NAME).to_dataframe()


@plugin.register_transformer
def _7(data: JudgmentSet) -> JudgmentsDirFmt:
    ff = JudgmentsDirFmt()
    with open(ff.path / JUDGMENTS_NAME, "w", encoding="utf-8") as fh:
        for r in data.records:
            record = {
                "prompt_id": r.prompt_id,
                "language": r.language,
                "model_id": r.model_id,
                "kind": r.kind.value,
            }
            if r.harmful is not None:
                record["harmful"] = r.harmful
            if r.winner is not None:
                record["winner"] = r.winner
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return ff
