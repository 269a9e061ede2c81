# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import importlib

from qiime2.core.type import Choices, Float, Int, List, Range, Str
from qiime2.plugin import Citations, Plugin

from q2_mergeforge import (
    __version__,
    apply_delta,
    compute_delta,
    merge_dare_ties,
    merge_linear,
    merge_slerp,
    merge_ties,
    metrics_report,
)
from q2_mergeforge.types import (
    Checkpoint,
    CheckpointDirFmt,
    Judgments,
    JudgmentsDirFmt,
    JudgmentsFormat,
    TaskVector,
    TensorArchiveFormat,
)

citations = Citations.load("citations.bib", package="q2_mergeforge")

plugin = Plugin(
    name="mergeforge",
    version=__version__,
    website="https://github.com/bokulich-lab/q2-mergeforge",
    package="q2_mergeforge",
    description=(
        "A QIIME 2 plugin for merging fine-tuned model checkpoints with linear, "
        "SLERP, TIES and DARE-TIES merges, and for scoring merged models from "
        "recorded judgments."
    ),
    short_description="Plugin for model checkpoint merging.",
    citations=[citations["wortsman_model_soups_2022"]],
)

Fraction01 = Float % Range(0, 1, inclusive_end=True)
NonNegative = Float % Range(0, None)

_threads = {"threads": Int % Range(1, None)}
_threads_description = {"threads": "Number of threads used across tensors."}
_consensus_parameters = {
    "density": Float % Range(0, 1, inclusive_start=False, inclusive_end=True),
    "sign_mode": Str % Choices("sign", "mass"),
    "weights": List[NonNegative],
    "anchors": List[Fraction01],
    **_threads,
}
_consensus_descriptions = {
    "density": "Fraction of each task vector kept after magnitude trimming. "
    "Defaults to 0.5.",
    "sign_mode": "Elect signs by summed sign ('sign') or by summed value "
    "('mass').",
    "weights": "Per-checkpoint weights for sign election and the disjoint mean.",
    "anchors": "Blend anchors stretched across layer depth; each value is the "
    "fraction of the first checkpoint. Requires exactly two checkpoints.",
    **_threads_description,
}
_checkpoints_description = {
    "checkpoints": "Fine-tuned checkpoints sharing tensor names and shapes.",
    "base": "Base checkpoint the task vectors are computed against.",
}

plugin.methods.register_function(
    function=merge_linear,
    inputs={"checkpoints": List[Checkpoint]},
    parameters={"alphas": List[NonNegative], **_threads},
    outputs=[("merged", Checkpoint)],
    input_descriptions={"checkpoints": "Checkpoints to average."},
    parameter_descriptions={
        "alphas": "One weight per checkpoint; normalized to sum to 1.",
        **_threads_description,
    },
    output_descriptions={"merged": "Merged checkpoint."},
    name="Linear merge.",
    description="Weighted average of checkpoint parameters.",
    citations=[citations["wortsman_model_soups_2022"]],
)

plugin.methods.register_function(
    function=merge_slerp,
    inputs={"checkpoint_1": Checkpoint, "checkpoint_2": Checkpoint},
    parameters={
        "t": Fraction01,
        "anchors": List[Fraction01],
        "default_t": Fraction01,
        **_threads,
    },
    outputs=[("merged", Checkpoint)],
    input_descriptions={
        "checkpoint_1": "First checkpoint (selected at t=0).",
        "checkpoint_2": "Second checkpoint (selected at t=1).",
    },
    parameter_descriptions={
        "t": "Interpolation coefficient. Defaults to 0.5 unless anchors are given.",
        "anchors": "Blend anchors stretched across layer depth; each value is the "
        "fraction of the first checkpoint.",
        "default_t": "Blend ratio for tensors outside any layer. Defaults to the "
        "schedule's midpoint.",
        **_threads_description,
    },
    output_descriptions={"merged": "Merged checkpoint."},
    name="Spherical linear interpolation merge.",
    description="Interpolate two checkpoints along the arc between them.",
    citations=[citations["shoemake_slerp_1985"]],
)

plugin.methods.register_function(
    function=merge_ties,
    inputs={"checkpoints": List[Checkpoint], "base": Checkpoint},
    parameters=_consensus_parameters,
    outputs=[("merged", Checkpoint)],
    input_descriptions=_checkpoints_description,
    parameter_descriptions=_consensus_descriptions,
    output_descriptions={"merged": "Merged checkpoint."},
    name="TIES merge.",
    description="Trim task vectors, elect signs and average the agreeing values.",
    citations=[citations["yadav_ties_2023"]],
)

plugin.methods.register_function(
    function=merge_dare_ties,
    inputs={"checkpoints": List[Checkpoint], "base": Checkpoint},
    parameters={
        **_consensus_parameters,
        "drop_prob": Float % Range(0, 1),
        "seed": Int % Range(0, None),
    },
    outputs=[("merged", Checkpoint)],
    input_descriptions=_checkpoints_description,
    parameter_descriptions={
        **_consensus_descriptions,
        "drop_prob": "Probability of dropping each delta entry before TIES. "
        "Defaults to 0.9.",
        "seed": "Seed of the drop masks.",
    },
    output_descriptions={"merged": "Merged checkpoint."},
    name="DARE-TIES merge.",
    description="Drop and rescale task vectors, then merge them with TIES.",
    citations=[citations["yu_dare_2024"], citations["yadav_ties_2023"]],
)

plugin.methods.register_function(
    function=compute_delta,
    inputs={"checkpoint": Checkpoint, "base": Checkpoint},
    parameters={},
    outputs=[("delta", TaskVector)],
    input_descriptions={
        "checkpoint": "Fine-tuned checkpoint.",
        "base": "Base checkpoint it was fine-tuned from.",
    },
    parameter_descriptions={},
    output_descriptions={"delta": "Elementwise checkpoint minus base."},
    name="Compute a task vector.",
    description="Subtract the base checkpoint from a fine-tuned checkpoint.",
    citations=[citations["ilharco_task_arithmetic_2023"]],
)

plugin.methods.register_function(
    function=apply_delta,
    inputs={"base": Checkpoint, "delta": TaskVector},
    parameters={},
    outputs=[("checkpoint", Checkpoint)],
    input_descriptions={
        "base": "Base checkpoint.",
        "delta": "Task vector to add.",
    },
    parameter_descriptions={},
    output_descriptions={"checkpoint": "Base plus task vector."},
    name="Apply a task vector.",
    description="Add a task vector to a base checkpoint.",
    citations=[citations["ilharco_task_arithmetic_2023"]],
)

plugin.visualizers.register_function(
    function=metrics_report,
    inputs={"judgments": Judgments},
    parameters={"base_model": Str, "baseline": Str},
    input_descriptions={"judgments": "Recorded harm and preference judgments."},
    parameter_descriptions={
        "base_model": "Model id harm rates are compared against.",
        "baseline": "Model id whose row the other rows are compared to.",
    },
    name="Visualize merge metrics.",
    description="Per-language safety and general metrics with baseline deltas.",
    citations=[],
)

plugin.register_formats(
    TensorArchiveFormat, CheckpointDirFmt, JudgmentsFormat, JudgmentsDirFmt
)
plugin.register_semantic_types(Checkpoint, TaskVector, Judgments)
plugin.register_semantic_type_to_format(Checkpoint, CheckpointDirFmt)
plugin.register_semantic_type_to_format(TaskVector, CheckpointDirFmt)
plugin.register_semantic_type_to_format(Judgments, JudgmentsDirFmt)

importlib.import_module("q2_mergeforge.types._transformer")
