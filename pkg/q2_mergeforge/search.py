# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import enum
import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ._errors import BadGrid, MissingScores
from .mergecore import (
    DEFAULT_DENSITY,
    DEFAULT_DROP_PROB,
    DareOptions,
    MergeWeights,
    SignMode,
    TiesOptions,
    dare_ties_merge,
    linear_merge,
    slerp_merge,
    ties_merge,
)
from .tensorio import TensorArchive

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0.0, 0.3, 0.5, 0.7, 1.0)
DEDUP_TOLERANCE = 1e-9
REQUIRED_METRICS = ("safety", "general")

Evaluator = Callable[[TensorArchive], Mapping[str, float]]


class Method(enum.Enum):
    LINEAR = "linear"
    SLERP = "slerp"
    TIES = "ties"
    DARE_TIES = "dare_ties"


class Status(enum.Enum):
    OK = "OK"
    FAILED = "FAILED"
    UNSCORED = "UNSCORED"


@dataclass(frozen=True)
class GridSpec:
    method: Method
    arity: int = 2
    values: Sequence[float] = DEFAULT_GRID

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if not values:
            raise BadGrid("Grid values must not be empty")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise BadGrid(f"Grid values must lie in [0, 1]: {list(values)}")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise BadGrid(f"Grid values must be strictly increasing: {list(values)}")
        if self.arity < 2:
            raise BadGrid("A sweep needs at least two models")
        if self.method is Method.SLERP and self.arity != 2:
            raise BadGrid("SLERP merges exactly two models")


@dataclass
class Candidate:
    coefficients: Tuple[float, ...]
    recipe: Dict[str, object]
    scores: Optional[Dict[str, float]] = None

    @property
    def candidate_id(self) -> str:
        return ",".join(f"{c:.6g}" for c in self.coefficients)


@dataclass
class SweepOptions:
    """Merge settings shared by every candidate of a sweep."""

    density: float = DEFAULT_DENSITY
    sign_mode: SignMode = SignMode.SIGN
    drop_prob: float = DEFAULT_DROP_PROB
    seed: int = 0
    output_dtype: str = "auto"
    merge_threads: int = 1


@dataclass
class SweepResult:
    candidate: Candidate
    status: Status
    scores: Dict[str, float] = field(default_factory=dict)
    score: Optional[float] = None
    rank: Optional[int] = None
    error: str = ""


def _candidate(method: Method, coefficients: Tuple[float, ...]) -> Candidate:
    if method is Method.SLERP:
        recipe = {"method": method.value, "t": coefficients[0]}
    elif method is Method.LINEAR:
        recipe = {"method": method.value, "alphas": list(coefficients)}
    else:
        recipe = {"method": method.value, "weights": list(coefficients)}
    return Candidate(coefficients, recipe)


def enumerate_grid(g: GridSpec) -> List[Candidate]:
    if g.method is Method.SLERP:
        return [_candidate(g.method, (v,)) for v in g.values]

    raw = [c for c in itertools.product(g.values, repeat=g.arity) if any(c)]
    if g.method is not Method.LINEAR:
        return [_candidate(g.method, c) for c in raw]

    seen: List[Tuple[float, ...]] = []
    for combo in raw:
        total = math.fsum(combo)
        normalized = tuple(c / total for c in combo)
        duplicate = any(
            all(abs(a - b) <= DEDUP_TOLERANCE for a, b in zip(normalized, other))
            for other in seen
        )
        if not duplicate:
            seen.append(normalized)
    return [_candidate(g.method, c) for c in seen]


def materialize(
    candidate: Candidate,
    models: Sequence[TensorArchive],
    base: Optional[TensorArchive],
    options: SweepOptions = SweepOptions(),
) -> TensorArchive:
    method = Method(candidate.recipe["method"])
    kwargs = {"threads": options.merge_threads, "output_dtype": options.output_dtype}
    if method is Method.LINEAR:
        return linear_merge(models, MergeWeights(candidate.coefficients), **kwargs)
    if method is Method.SLERP:
        return slerp_merge(models[0], models[1], candidate.coefficients[0], **kwargs)
    ties_opts = TiesOptions(
        density=options.density,
        sign_mode=options.sign_mode,
        weights=candidate.coefficients,
    )
    if method is Method.TIES:
        return ties_merge(models, base, ties_opts, **kwargs)
    dare_opts = DareOptions(drop_prob=options.drop_prob, rng_seed=options.seed)
    return dare_ties_merge(models, base, ties_opts, dare_opts, **kwargs)


def rank_score(scores: Mapping[str, float], weights: Tuple[float, float]) -> float:
    """Weighted mean of general performance and harm reduction (-safety)."""
    w_general, w_safety = weights
    return (w_general * scores["general"] - w_safety * scores["safety"]) / (
        w_general + w_safety
    )


def rank_results(
    results: List[SweepResult], weights: Tuple[float, float] = (0.5, 0.5)
) -> List[SweepResult]:
    scored = [r for r in results if r.status is Status.OK]
    for result in scored:
        result.score = rank_score(result.scores, weights)
    scored.sort(key=lambda r: (-r.score, r.candidate.coefficients))
    for rank, result in enumerate(scored, start=1):
        result.rank = rank
    rest = sorted(
        (r for r in results if r.status is not Status.OK),
        key=lambda r: (r.status is Status.FAILED, r.candidate.coefficients),
    )
    return scored + rest


def _score_candidate(
    candidate: Candidate,
    models: Sequence[TensorArchive],
    base: Optional[TensorArchive],
    evaluator: Evaluator,
    options: SweepOptions,
) -> SweepResult:
    try:
        merged = materialize(candidate, models, base, options)
        scores = dict(evaluator(merged))
        missing = [k for k in REQUIRED_METRICS if k not in scores]
        if missing:
            raise MissingScores(f"Evaluator did not report {missing}")
    except Exception as e:
        logger.warning("Candidate %s failed: %s", candidate.candidate_id, e)
        return SweepResult(candidate, Status.FAILED, error=f"{type(e).__name__}: {e}")
    candidate.scores = scores
    return SweepResult(candidate, Status.OK, scores)


def run_sweep(
    candidates: Sequence[Candidate],
    models: Sequence[TensorArchive],
    base: Optional[TensorArchive],
    evaluator: Evaluator,
    options: SweepOptions = SweepOptions(),
    weights: Tuple[float, float] = (0.5, 0.5),
    threads: int = 1,
) -> List[SweepResult]:
    """
    Merge and score every candidate of a grid.

    A candidate that fails to merge or score is reported with status FAILED
    and its reason; the sweep itself never raises for it.

    Parameters
    ----------
    candidates : sequence of Candidate
        Coefficient tuples from ``enumerate_grid``.
    models : sequence of TensorArchive
        Models being merged.
    base : TensorArchive, optional
        Base model for TIES and DARE-TIES candidates.
    evaluator : Evaluator
        Scores a merged archive for a candidate.
    options : SweepOptions, optional
        Merge knobs shared by all candidates.
    weights : tuple of float, optional
        Ranking weights for the general and safety scores.
    threads : int, optional
        Number of candidates processed concurrently.

    Returns
    -------
    list of SweepResult
        Results in rank order; unranked candidates come last.
    """

    results = []
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
        futures = [
            executor.submit(_score_candidate, c, models, base, evaluator, options)
            for c in candidates
        ]
        for future in as_completed(futures):
            results.append(future.result())
    logger.info(
        "Sweep finished: %d candidates, %d failed",
        len(results),
        sum(r.status is Status.FAILED for r in results),
    )
    return rank_results(results, weights)


class DistanceToTarget:
    """Scores a merge by its L2 distance to a known target archive."""

    def __init__(self, target: TensorArchive):
        self.target = target

    def __call__(self, merged: TensorArchive) -> Dict[str, float]:
        total = 0.0
        for name, array in merged.items():
            diff = array.astype(np.float64) - self.target[name].astype(np.float64)
            total += float(np.sum(diff * diff))
        distance = math.sqrt(total)
        return {"general": -distance, "safety": 0.0, "distance": distance}


def read_scores(path: os.PathLike) -> Dict[str, Dict[str, float]]:
    """Read an external scores table (tab-separated, keyed by candidate_id)."""
    df = pd.read_csv(path, sep="\t", dtype={"candidate_id": str})
    missing = [c for c in ("candidate_id",) + REQUIRED_METRICS if c not in df.columns]
    if missing:
        raise MissingScores(f"Scores file {path} lacks columns {missing}")
    df = df.set_index("candidate_id").select_dtypes(include="number")
    return {cid: row.dropna().astype(float).to_dict() for cid, row in df.iterrows()}


def join_scores(
    candidates: Sequence[Candidate],
    scores: Mapping[str, Mapping[str, float]],
    weights: Tuple[float, float] = (0.5, 0.5),
) -> List[SweepResult]:
    results = []
    for candidate in candidates:
        row = scores.get(candidate.candidate_id)
        if row is None or any(k not in row for k in REQUIRED_METRICS):
            results.append(SweepResult(candidate, Status.UNSCORED))
            continue
        candidate.scores = dict(row)
        results.append(SweepResult(candidate, Status.OK, dict(row)))
    return rank_results(results, weights)


def sweep_table(results: Sequence[SweepResult]) -> pd.DataFrame:
    metric_names = sorted({k for r in results for k in r.scores})
    rows = []
    for r in results:
        row = {
            "rank": r.rank,
            "candidate_id": r.candidate.candidate_id,
            "method": r.candidate.recipe["method"],
            "status": r.status.value,
        }
        for i, c in enumerate(r.candidate.coefficients, start=1):
            row[f"coef_{i}"] = c
        row["score"] = r.score
        for name in metric_names:
            row[name] = r.scores.get(name)
        row["error"] = r.error
        rows.append(row)
    df = pd.DataFrame(rows)
    if not df.empty:
        df["rank"] = df["rank"].astype("Int64")
    return df


def write_sweep_report(results: Sequence[SweepResult], directory: os.PathLike):
    """Write ``sweep.tsv`` and its structured mirror ``sweep.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    df = sweep_table(results)
    df.to_csv(directory / "sweep.tsv", sep="\t", index=False)
    records = []
    for r in results:
        records.append(
            {
                "rank": r.rank,
                "candidate_id": r.candidate.candidate_id,
                "status": r.status.value,
                "coefficients": list(r.candidate.coefficients),
                "recipe": r.candidate.recipe,
                "score": r.score,
                "scores": r.scores,
                "error": r.error,
            }
        )
    with open(directory / "sweep.json", "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
    return directory / "sweep.tsv", directory / "sweep.json"


class ScoresFileEvaluator:
    """Scores recorded offline, one row per candidate id in a TSV file."""

    def __init__(self, path: os.PathLike):
        self.path = path
        self.scores = read_scores(path)

    def results(
        self,
        candidates: Sequence[Candidate],
        weights: Tuple[float, float] = (0.5, 0.5),
    ) -> List[SweepResult]:
        results = join_scores(candidates, self.scores, weights)
        unscored = [r for r in results if r.status is Status.UNSCORED]
        if unscored:
            logger.warning(
                "%d candidates have no scores in %s", len(unscored), self.path
            )
        return results
