# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from ._errors import IoFailure, RecipeInvalid
from .mergecore import (
    DEFAULT_DENSITY,
    DEFAULT_DROP_PROB,
    RECIPE_KEY,
    ApplyTo,
    DareOptions,
    MergeWeights,
    SignMode,
    TiesOptions,
    dare_ties_merge,
    linear_merge,
    slerp_merge,
    ties_merge,
)
from .schedule import BlendSchedule, LayerMap, per_tensor_t, schedule_trace
from .search import DEFAULT_GRID, Method
from .tensorio import TensorArchive, read_archive, write_archive

logger = logging.getLogger(__name__)

OUTPUT_DTYPES = ("auto", "F32", "F16")
SCHEDULE_KEY = "merge_schedule"


def load_document(path: os.PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise IoFailure(f"Cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise RecipeInvalid("<document>", f"not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise RecipeInvalid("<document>", "top level must be a mapping")
    return data


def _number(name, value, low=None, high=None, low_open=False, high_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RecipeInvalid(name, f"expected a number, got {value!r}")
    value = float(value)
    if low is not None and (value < low or (low_open and value == low)):
        raise RecipeInvalid(name, f"{value} is out of range")
    if high is not None and (value > high or (high_open and value == high)):
        raise RecipeInvalid(name, f"{value} is out of range")
    return value


def _numbers(name, values, **bounds) -> List[float]:
    if not isinstance(values, list) or not values:
        raise RecipeInvalid(name, "expected a non-empty list of numbers")
    return [_number(name, v, **bounds) for v in values]


def _paths(name, values, root: Path) -> List[str]:
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise RecipeInvalid(name, "expected a list of paths")
    return [_path(name, v, root) for v in values]


def _path(name, value, root: Path) -> str:
    if not isinstance(value, str) or not value:
        raise RecipeInvalid(name, "expected a path")
    path = Path(value)
    return str(path if path.is_absolute() else root / path)


def _choice(name, value, choices):
    if value not in choices:
        raise RecipeInvalid(name, f"expected one of {list(choices)}, got {value!r}")
    return value


def _seed(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise RecipeInvalid("seed", "expected an integer")
    if not 0 <= value < 2**64:
        raise RecipeInvalid("seed", "expected a 64-bit unsigned integer")
    return value


@dataclass
class MergeRecipe:
    method: str
    models: List[str]
    output: str
    base: Optional[str] = None
    alphas: Optional[List[float]] = None
    t: Optional[float] = None
    anchors: Optional[List[float]] = None
    default_t: Optional[float] = None
    density: Optional[float] = None
    sign_mode: str = SignMode.SIGN.value
    apply_to: str = ApplyTo.DELTAS.value
    weights: Optional[List[float]] = None
    drop_prob: Optional[float] = None
    seed: int = 0
    output_dtype: str = "auto"
    defaults_applied: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls) if f.name != "defaults_applied")

    @classmethod
    def from_dict(cls, data: dict, root: os.PathLike = ".") -> "MergeRecipe":
        """Validate a recipe document; every problem is RecipeInvalid(field)."""
        root = Path(root)
        known = cls.field_names()
        for key in data:
            if key not in known:
                raise RecipeInvalid(str(key), "unknown field")
        for required in ("method", "models", "output"):
            if data.get(required) is None:
                raise RecipeInvalid(required, "field is required")

        method = _choice("method", data["method"], [m.value for m in Method])
        recipe = cls(
            method=method,
            models=_paths("models", data["models"], root),
            output=_path("output", data["output"], root),
        )
        if data.get("base") is not None:
            recipe.base = _path("base", data["base"], root)
        if data.get("alphas") is not None:
            recipe.alphas = _numbers("alphas", data["alphas"], low=0.0)
        if data.get("t") is not None:
            recipe.t = _number("t", data["t"], low=0.0, high=1.0)
        if data.get("anchors") is not None:
            recipe.anchors = _numbers("anchors", data["anchors"], low=0.0, high=1.0)
        if data.get("default_t") is not None:
            recipe.default_t = _number(
                "default_t", data["default_t"], low=0.0, high=1.0
            )
        if data.get("density") is not None:
            recipe.density = _number(
                "density", data["density"], low=0.0, high=1.0, low_open=True
            )
        if data.get("weights") is not None:
            recipe.weights = _numbers("weights", data["weights"], low=0.0)
        if data.get("drop_prob") is not None:
            recipe.drop_prob = _number(
                "drop_prob", data["drop_prob"], low=0.0, high=1.0, high_open=True
            )
        if data.get("seed") is not None:
            recipe.seed = _seed(data["seed"])
        recipe.sign_mode = _choice(
            "sign_mode",
            data.get("sign_mode", recipe.sign_mode),
            [m.value for m in SignMode],
        )
        recipe.apply_to = _choice(
            "apply_to",
            data.get("apply_to", recipe.apply_to),
            [a.value for a in ApplyTo],
        )
        recipe.output_dtype = _choice(
            "output_dtype", data.get("output_dtype", recipe.output_dtype), OUTPUT_DTYPES
        )
        recipe.check()
        return recipe

    def check(self) -> None:
        """Method-specific and cross-field rules."""
        n = len(self.models)
        if n < 2:
            raise RecipeInvalid("models", "at least two models are required")
        if self.method == Method.LINEAR.value:
            if self.alphas is None:
                raise RecipeInvalid("alphas", "linear merges need alphas")
            if len(self.alphas) != n:
                raise RecipeInvalid("alphas", f"expected {n} values")
            if sum(self.alphas) == 0:
                raise RecipeInvalid("alphas", "all weights are zero")
            for name in ("t", "anchors", "weights"):
                if getattr(self, name) is not None:
                    raise RecipeInvalid(name, "not used by linear merges")
        elif self.method == Method.SLERP.value:
            if n != 2:
                raise RecipeInvalid("models", "SLERP merges exactly two models")
            if (self.t is None) == (self.anchors is None):
                raise RecipeInvalid("t", "give exactly one of t or anchors")
            for name in ("alphas", "weights"):
                if getattr(self, name) is not None:
                    raise RecipeInvalid(name, "not used by SLERP")
        else:
            if self.base is None:
                raise RecipeInvalid("base", f"{self.method} needs a base model")
            if self.t is not None:
                raise RecipeInvalid("t", f"{self.method} takes anchors, not t")
            if self.alphas is not None:
                raise RecipeInvalid("alphas", f"not used by {self.method}")
            if self.weights is not None and len(self.weights) != n:
                raise RecipeInvalid("weights", f"expected {n} values")
            if self.anchors is not None and n != 2:
                raise RecipeInvalid("anchors", "schedules blend exactly two models")
            if self.anchors is not None and self.weights is not None:
                raise RecipeInvalid("weights", "give either weights or anchors")
            if self.method == Method.DARE_TIES.value and self.apply_to != "deltas":
                raise RecipeInvalid("apply_to", "DARE-TIES drops delta parameters")
        if self.default_t is not None and self.anchors is None:
            raise RecipeInvalid("default_t", "only used with anchors")

    def apply_defaults(self) -> Dict[str, float]:
        """Fill unset method knobs and remember which ones were defaulted."""
        applied = {}
        if self.method in (Method.TIES.value, Method.DARE_TIES.value):
            if self.density is None:
                self.density = applied["density"] = DEFAULT_DENSITY
        if self.method == Method.DARE_TIES.value and self.drop_prob is None:
            self.drop_prob = applied["drop_prob"] = DEFAULT_DROP_PROB
        if self.anchors is not None and self.default_t is None:
            midpoint = BlendSchedule(self.anchors).unlayered_t
            self.default_t = applied["default_t"] = midpoint
        self.defaults_applied.update(applied)
        return applied

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def load_recipe(path: os.PathLike, **overrides) -> MergeRecipe:
    data = load_document(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return MergeRecipe.from_dict(data, root=Path(path).parent)


@dataclass
class GridDocument:
    """A sweep definition: models to merge, grid values and the evaluator."""

    method: str
    models: List[str]
    output: str
    base: Optional[str] = None
    values: List[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    density: float = DEFAULT_DENSITY
    sign_mode: str = SignMode.SIGN.value
    drop_prob: float = DEFAULT_DROP_PROB
    seed: int = 0
    output_dtype: str = "auto"
    target: Optional[str] = None
    scores: Optional[str] = None
    ranking_weights: Dict[str, float] = field(
        default_factory=lambda: {"general": 0.5, "safety": 0.5}
    )

    @classmethod
    def from_dict(cls, data: dict, root: os.PathLike = ".") -> "GridDocument":
        root = Path(root)
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise RecipeInvalid(str(key), "unknown field")
        for required in ("method", "models", "output"):
            if data.get(required) is None:
                raise RecipeInvalid(required, "field is required")
        doc = cls(
            method=_choice("method", data["method"], [m.value for m in Method]),
            models=_paths("models", data["models"], root),
            output=_path("output", data["output"], root),
        )
        if data.get("base") is not None:
            doc.base = _path("base", data["base"], root)
        if data.get("values") is not None:
            doc.values = _numbers("values", data["values"])
        if data.get("density") is not None:
            doc.density = _number(
                "density", data["density"], low=0.0, high=1.0, low_open=True
            )
        if data.get("drop_prob") is not None:
            doc.drop_prob = _number(
                "drop_prob", data["drop_prob"], low=0.0, high=1.0, high_open=True
            )
        if data.get("seed") is not None:
            doc.seed = _seed(data["seed"])
        doc.sign_mode = _choice(
            "sign_mode",
            data.get("sign_mode", doc.sign_mode),
            [m.value for m in SignMode],
        )
        doc.output_dtype = _choice(
            "output_dtype", data.get("output_dtype", doc.output_dtype), OUTPUT_DTYPES
        )
        if data.get("target") is not None:
            doc.target = _path("target", data["target"], root)
        if data.get("scores") is not None:
            doc.scores = _path("scores", data["scores"], root)
        if data.get("ranking_weights") is not None:
            weights = data["ranking_weights"]
            if not isinstance(weights, dict) or set(weights) != {"general", "safety"}:
                raise RecipeInvalid("ranking_weights", "expected general and safety")
            doc.ranking_weights = {
                k: _number("ranking_weights", v, low=0.0) for k, v in weights.items()
            }
            if sum(doc.ranking_weights.values()) == 0:
                raise RecipeInvalid("ranking_weights", "weights sum to zero")
        if doc.method in (Method.TIES.value, Method.DARE_TIES.value) and not doc.base:
            raise RecipeInvalid("base", f"{doc.method} needs a base model")
        if (doc.target is None) == (doc.scores is None):
            raise RecipeInvalid("target", "give exactly one of target or scores")
        return doc


def load_grid(path: os.PathLike, **overrides) -> GridDocument:
    data = load_document(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return GridDocument.from_dict(data, root=Path(path).parent)


def merge_archives(
    recipe: MergeRecipe,
    models: List[TensorArchive],
    base: Optional[TensorArchive] = None,
    threads: int = 1,
) -> TensorArchive:
    """Run the merge a validated recipe describes and echo it into metadata.

    A blend schedule gives the fraction of Model 1 per layer. SLERP's
    coefficient runs the other way (0 selects Model 1), so it receives
    ``1 - ratio``; TIES and DARE-TIES get election weights ``(ratio, 1 - ratio)``.
    """
    for name, value in recipe.apply_defaults().items():
        logger.warning("%s not set, using default %s", name, value)

    schedule = layer_map = None
    if recipe.anchors is not None:
        schedule = BlendSchedule(recipe.anchors, recipe.default_t)
        layer_map = LayerMap.from_names(models[0].names())

    kwargs = {"threads": threads, "output_dtype": recipe.output_dtype}
    if recipe.method == Method.LINEAR.value:
        merged = linear_merge(models, MergeWeights(recipe.alphas), **kwargs)
    elif recipe.method == Method.SLERP.value:
        if schedule is not None:

            def t(name):
                return 1.0 - per_tensor_t(schedule, layer_map, name)

        else:
            t = recipe.t
        merged = slerp_merge(models[0], models[1], t, **kwargs)
    else:
        ties_opts = TiesOptions(
            density=recipe.density,
            sign_mode=SignMode(recipe.sign_mode),
            weights=recipe.weights,
            apply_to=ApplyTo(recipe.apply_to),
        )
        weights_for = None
        if schedule is not None:

            def weights_for(name):
                ratio = per_tensor_t(schedule, layer_map, name)
                return ratio, 1.0 - ratio

        if recipe.method == Method.TIES.value:
            merged = ties_merge(models, base, ties_opts, weights_for, **kwargs)
        else:
            dare_opts = DareOptions(drop_prob=recipe.drop_prob, rng_seed=recipe.seed)
            merged = dare_ties_merge(
                models, base, ties_opts, dare_opts, weights_for, **kwargs
            )

    metadata = {RECIPE_KEY: recipe.to_json()}
    if schedule is not None:
        metadata[SCHEDULE_KEY] = json.dumps(
            schedule_trace(schedule, layer_map), sort_keys=True
        )
    return merged.with_metadata(**metadata)


def execute_recipe(recipe: MergeRecipe, threads: int = 1) -> TensorArchive:
    models = [read_archive(path, lazy=True) for path in recipe.models]
    base = read_archive(recipe.base, lazy=True) if recipe.base else None
    merged = merge_archives(recipe, models, base, threads)
    write_archive(merged, recipe.output)
    logger.info("Wrote %s merge to %s", recipe.method, recipe.output)
    return merged
