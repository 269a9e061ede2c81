# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
from typing import List

from . import mergecore
from .evalmetrics import JudgmentSet, build_report, render_html, score_judgments
from .recipe import MergeRecipe, merge_archives
from .tensorio import TensorArchive


def _run(recipe: MergeRecipe, models, base=None, threads: int = 1) -> TensorArchive:
    recipe.check()
    merged = merge_archives(recipe, list(models), base, threads)
    for name, value in recipe.defaults_applied.items():
        print(f"Using default {name}={value}")
    return merged


def _sources(models) -> List[str]:
    return [m.source or f"input-{i}" for i, m in enumerate(models, start=1)]


def merge_linear(
    checkpoints: TensorArchive, alphas: list, threads: int = 1
) -> TensorArchive:
    """Weighted average of checkpoints; alphas are normalized to sum to 1."""
    recipe = MergeRecipe(
        method="linear", models=_sources(checkpoints), output="", alphas=alphas
    )
    return _run(recipe, checkpoints, threads=threads)


def merge_slerp(
    checkpoint_1: TensorArchive,
    checkpoint_2: TensorArchive,
    t: float = None,
    anchors: list = None,
    default_t: float = None,
    threads: int = 1,
) -> TensorArchive:
    models = [checkpoint_1, checkpoint_2]
    if t is None and anchors is None:
        t = 0.5
    recipe = MergeRecipe(
        method="slerp",
        models=_sources(models),
        output="",
        t=t,
        anchors=anchors,
        default_t=default_t,
    )
    return _run(recipe, models, threads=threads)


def merge_ties(
    checkpoints: TensorArchive,
    base: TensorArchive,
    density: float = None,
    sign_mode: str = "sign",
    weights: list = None,
    anchors: list = None,
    threads: int = 1,
) -> TensorArchive:
    recipe = MergeRecipe(
        method="ties",
        models=_sources(checkpoints),
        output="",
        base=base.source or "base",
        density=density,
        sign_mode=sign_mode,
        weights=weights,
        anchors=anchors,
    )
    return _run(recipe, checkpoints, base, threads)


def merge_dare_ties(
    checkpoints: TensorArchive,
    base: TensorArchive,
    density: float = None,
    drop_prob: float = None,
    seed: int = 0,
    sign_mode: str = "sign",
    weights: list = None,
    anchors: list = None,
    threads: int = 1,
) -> TensorArchive:
    recipe = MergeRecipe(
        method="dare_ties",
        models=_sources(checkpoints),
        output="",
        base=base.source or "base",
        density=density,
        drop_prob=drop_prob,
        seed=seed,
        sign_mode=sign_mode,
        weights=weights,
        anchors=anchors,
    )
    return _run(recipe, checkpoints, base, threads)


def compute_delta(
    checkpoint: TensorArchive, base: TensorArchive
) -> mergecore.TaskVector:
    return mergecore.compute_delta(checkpoint, base)


def apply_delta(base: TensorArchive, delta: mergecore.TaskVector) -> TensorArchive:
    return mergecore.apply_delta(base, delta)


def metrics_report(
    output_dir: str,
    judgments: JudgmentSet,
    base_model: str,
    baseline: str,
) -> None:
    """Score a judgment set and render the table with deltas to a baseline."""
    table = score_judgments(judgments, base_model, baseline).with_aggregate()
    render_html(build_report(table), output_dir)
