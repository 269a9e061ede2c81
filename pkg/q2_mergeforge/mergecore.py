# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import enum
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from ._errors import (
    BadCoefficient,
    InvariantViolation,
    RecipeInvalid,
    ZeroWeightSum,
)
from .tensorio import DTYPES, TensorArchive, cast, ensure_compatible

logger = logging.getLogger(__name__)

DEFAULT_DENSITY = 0.5
DEFAULT_DROP_PROB = 0.9
COLINEAR_THRESHOLD = 0.9995
MIN_SIN_OMEGA = 1e-6
RECIPE_KEY = "merge_recipe"

Coefficient = Union[float, Callable[[str], float]]
WeightSource = Callable[[str], Optional[Sequence[float]]]


class SignMode(enum.Enum):
    SIGN = "sign"
    MASS = "mass"


class ApplyTo(enum.Enum):
    DELTAS = "deltas"
    RAW = "raw"


@dataclass(frozen=True)
class MergeWeights:
    alphas: Sequence[float]

    def __post_init__(self):
        if any(a < 0 or not math.isfinite(a) for a in self.alphas):
            raise BadCoefficient(
                f"Weights must be finite and non-negative: {self.alphas}"
            )

    def normalized(self) -> List[float]:
        total = math.fsum(self.alphas)
        if total == 0:
            raise ZeroWeightSum("All merge weights are zero")
        return [a / total for a in self.alphas]


@dataclass
class TaskVector:
    deltas: Dict[str, np.ndarray]
    base_id: str = ""

    def to_archive(self) -> TensorArchive:
        return TensorArchive(self.deltas, {"task_vector_base": self.base_id})

    @classmethod
    def from_archive(cls, archive: TensorArchive) -> "TaskVector":
        deltas = {name: cast(arr, "F32") for name, arr in archive.items()}
        return cls(deltas, archive.metadata.get("task_vector_base", archive.source))


@dataclass(frozen=True)
class TiesOptions:
    density: float = DEFAULT_DENSITY
    sign_mode: SignMode = SignMode.SIGN
    weights: Optional[Sequence[float]] = None
    apply_to: ApplyTo = ApplyTo.DELTAS

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise BadCoefficient(f"density must lie in (0, 1]: {self.density}")
        if self.weights is not None and any(w < 0 for w in self.weights):
            raise BadCoefficient(f"TIES weights must be non-negative: {self.weights}")

    def describe(self) -> dict:
        return {
            "density": self.density,
            "sign_mode": self.sign_mode.value,
            "weights": list(self.weights) if self.weights is not None else None,
            "apply_to": self.apply_to.value,
        }


@dataclass(frozen=True)
class DareOptions:
    drop_prob: float = DEFAULT_DROP_PROB
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise BadCoefficient(f"drop_prob must lie in [0, 1): {self.drop_prob}")

    def describe(self) -> dict:
        return {"drop_prob": self.drop_prob, "seed": self.rng_seed}


def _f32(array: np.ndarray) -> np.ndarray:
    return cast(np.asarray(array), "F32")


def _wide(array: np.ndarray) -> np.ndarray:
    # F32 inputs widen losslessly; every kernel rounds to F32 exactly once
    return _f32(array).astype(np.float64)


def _map_tensors(
    names: Sequence[str], kernel: Callable[[str], np.ndarray], threads: int = 1
) -> Dict[str, np.ndarray]:
    if threads <= 1:
        return {name: kernel(name) for name in names}
    results = {}
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(kernel, name): name for name in names}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
            logger.debug("Merged tensor %s", futures[future])
    return {name: results[name] for name in names}


def _finish(
    tensors: Dict[str, np.ndarray],
    like: TensorArchive,
    output_dtype: str,
    recipe: dict,
) -> TensorArchive:
    out = {}
    for name, array in tensors.items():
        target = like.dtype_of(name) if output_dtype == "auto" else output_dtype
        out[name] = cast(array.astype(DTYPES["F32"]), target)
    metadata = {RECIPE_KEY: json.dumps(recipe, sort_keys=True)}
    return TensorArchive(out, metadata)


def compute_delta(model: TensorArchive, base: TensorArchive) -> TaskVector:
    ensure_compatible([model, base])
    deltas = {name: _f32(model[name]) - _f32(base[name]) for name in base}
    return TaskVector(deltas, base.source)


def apply_delta(
    base: TensorArchive, delta: TaskVector, output_dtype: str = "auto"
) -> TensorArchive:
    ensure_compatible([base, TensorArchive(delta.deltas)])
    tensors = {name: _f32(base[name]) + _f32(delta.deltas[name]) for name in base}
    return _finish(tensors, base, output_dtype, {"method": "apply_delta"})


def task_vector_norms(tv: TaskVector) -> Dict[str, float]:
    return {
        name: float(np.linalg.norm(_wide(d).ravel())) for name, d in tv.deltas.items()
    }


def _check_arity(models: Sequence[TensorArchive], minimum: int = 2) -> None:
    if len(models) < minimum:
        raise InvariantViolation(f"At least {minimum} models are required")


# Linear ---------------------------------------------------------------------


def linear_tensor(tensors: Sequence[np.ndarray], alphas: Sequence[float]) -> np.ndarray:
    """Weighted sum of tensors; ``alphas`` must already be normalized.

    Terms are sorted per element before accumulation, so the result does not
    depend on the order in which the models are given.
    """
    terms = [
        float(alpha) * _wide(tensor)
        for tensor, alpha in zip(tensors, alphas)
        if alpha != 0
    ]
    if not terms:
        raise ZeroWeightSum("All merge weights are zero")
    if len(terms) == 1:
        return terms[0].astype(np.float32)
    stacked = np.sort(np.stack(terms), axis=0)
    acc = stacked[0].copy()
    for row in stacked[1:]:
        acc += row
    return acc.astype(np.float32)


def linear_merge(
    models: Sequence[TensorArchive],
    w: MergeWeights,
    threads: int = 1,
    output_dtype: str = "auto",
) -> TensorArchive:
    _check_arity(models)
    if len(models) != len(w.alphas):
        raise BadCoefficient(
            f"{len(w.alphas)} weights given for {len(models)} models"
        )
    ensure_compatible(list(models))
    alphas = w.normalized()

    def kernel(name):
        return linear_tensor([m[name] for m in models], alphas)

    tensors = _map_tensors(models[0].names(), kernel, threads)
    logger.info("Linear merge of %d models with weights %s", len(models), alphas)
    return _finish(
        tensors, models[0], output_dtype, {"method": "linear", "alphas": alphas}
    )


# SLERP ----------------------------------------------------------------------


def _lerp(v1: np.ndarray, v2: np.ndarray, t: float) -> np.ndarray:
    return (1.0 - t) * v1 + t * v2


def slerp_tensor(v1: np.ndarray, v2: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between two tensors; ``t=0`` returns ``v1``."""
    if not 0.0 <= t <= 1.0:
        raise BadCoefficient(f"SLERP coefficient must lie in [0, 1]: {t}")
    if t == 0.0:
        return _f32(v1).copy()
    if t == 1.0:
        return _f32(v2).copy()
    a, b = _wide(v1), _wide(v2)
    norm_a, norm_b = np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel())
    if norm_a == 0 or norm_b == 0:
        return _lerp(a, b, t).astype(np.float32)
    dot = float(np.clip(np.dot(a.ravel() / norm_a, b.ravel() / norm_b), -1.0, 1.0))
    if abs(dot) > COLINEAR_THRESHOLD:
        return _lerp(a, b, t).astype(np.float32)
    omega = math.acos(dot)
    sin_omega = math.sin(omega)
    if sin_omega < MIN_SIN_OMEGA:
        return _lerp(a, b, t).astype(np.float32)
    s1 = math.sin((1.0 - t) * omega) / sin_omega
    s2 = math.sin(t * omega) / sin_omega
    return (s1 * a + s2 * b).astype(np.float32)


def slerp_merge(
    m1: TensorArchive,
    m2: TensorArchive,
    t: Coefficient,
    threads: int = 1,
    output_dtype: str = "auto",
) -> TensorArchive:
    ensure_compatible([m1, m2])
    names = m1.names()
    coefficients = {name: float(t(name) if callable(t) else t) for name in names}
    for name, value in coefficients.items():
        if not 0.0 <= value <= 1.0:
            raise BadCoefficient(f"SLERP coefficient for {name!r} is {value}")

    def kernel(name):
        return slerp_tensor(m1[name], m2[name], coefficients[name])

    tensors = _map_tensors(names, kernel, threads)
    recipe = {"method": "slerp"}
    if callable(t):
        recipe["t_per_tensor"] = coefficients
    else:
        recipe["t"] = float(t)
    return _finish(tensors, m1, output_dtype, recipe)


# TIES -----------------------------------------------------------------------


def trim_by_magnitude(delta: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * n) largest-magnitude entries; earlier index wins ties."""
    if not 0.0 < density <= 1.0:
        raise BadCoefficient(f"density must lie in (0, 1]: {density}")
    flat = np.asarray(delta).ravel()
    k = math.ceil(round(density * flat.size, 9))
    if k >= flat.size:
        return np.asarray(delta).copy()
    keep = np.argsort(-np.abs(flat), kind="stable")[:k]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(np.shape(delta))


def _weight_column(weights: Optional[Sequence[float]], count: int, ndim: int):
    if weights is None:
        weights = [1.0] * count
    if len(weights) != count:
        raise BadCoefficient(f"{len(weights)} weights given for {count} models")
    return np.asarray(weights, dtype=np.float64).reshape((count,) + (1,) * ndim)


def elect_signs(
    deltas: Sequence[np.ndarray],
    mode: SignMode = SignMode.SIGN,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    stacked = np.stack([np.asarray(d, dtype=np.float64) for d in deltas])
    w = _weight_column(weights, len(deltas), stacked.ndim - 1)
    votes = np.sign(stacked) if mode is SignMode.SIGN else stacked
    return np.sign(np.sum(w * votes, axis=0)).astype(np.float32)


def disjoint_merge(
    deltas: Sequence[np.ndarray],
    s: np.ndarray,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    stacked = np.stack([np.asarray(d, dtype=np.float64) for d in deltas])
    w = _weight_column(weights, len(deltas), stacked.ndim - 1)
    signs = np.asarray(s, dtype=np.float64)
    aligned = (np.sign(stacked) == signs) & (signs != 0)
    numerator = np.sum(np.where(aligned, w * stacked, 0.0), axis=0)
    denominator = np.sum(np.where(aligned, w, 0.0), axis=0)
    out = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=out, where=denominator > 0)
    return out


def ties_tensor(
    deltas: Sequence[np.ndarray],
    density: float = DEFAULT_DENSITY,
    mode: SignMode = SignMode.SIGN,
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Trim, elect and disjoint-merge per-model deltas of one tensor (float64)."""
    trimmed = [
        trim_by_magnitude(np.asarray(d, dtype=np.float64), density) for d in deltas
    ]
    s = elect_signs(trimmed, mode, weights)
    return disjoint_merge(trimmed, s, weights)


def _ties_driver(
    models: Sequence[TensorArchive],
    base: Optional[TensorArchive],
    opts: TiesOptions,
    transform: Callable[[str, List[np.ndarray]], List[np.ndarray]],
    weights_for: Optional[WeightSource],
    threads: int,
) -> Dict[str, np.ndarray]:
    _check_arity(models)
    raw = opts.apply_to is ApplyTo.RAW
    if base is None and not raw:
        raise RecipeInvalid("base", "TIES on deltas needs a base model")
    ensure_compatible(list(models) + ([base] if base is not None else []))

    def kernel(name):
        if raw:
            inputs = [_wide(m[name]) for m in models]
        else:
            inputs = [_wide(m[name]) - _wide(base[name]) for m in models]
        inputs = transform(name, inputs)
        weights = weights_for(name) if weights_for else None
        if weights is None:
            weights = opts.weights
        merged = ties_tensor(inputs, opts.density, opts.sign_mode, weights)
        if raw:
            return merged
        anchor = _wide(base[name])
        # untouched positions (sign ties, trimmed entries) keep the base value
        return np.where(merged != 0, anchor + merged, anchor)

    return _map_tensors(models[0].names(), kernel, threads)


def ties_merge(
    models: Sequence[TensorArchive],
    base: Optional[TensorArchive],
    opts: TiesOptions = TiesOptions(),
    weights_for: Optional[WeightSource] = None,
    threads: int = 1,
    output_dtype: str = "auto",
) -> TensorArchive:
    """
    Merge models by trimming, sign election and disjoint averaging.

    Parameters
    ----------
    models : sequence of TensorArchive
        Two or more fine-tuned models sharing names, shapes and dtypes.
    base : TensorArchive, optional
        Model the task vectors are taken against. Required unless
        ``opts.apply_to`` is ``ApplyTo.RAW``.
    opts : TiesOptions, optional
        Density, sign election mode and per-model election weights.
    weights_for : callable, optional
        Maps a tensor name to election weights for that tensor, or None to
        fall back to ``opts.weights``. Used by layer-wise blend schedules.
    threads : int, optional
        Number of tensors merged concurrently.
    output_dtype : str, optional
        ``auto`` keeps the first model's dtype per tensor; ``F32`` or ``F16``
        force one.

    Returns
    -------
    TensorArchive
        The merged model, with the applied options echoed in its metadata.
    """
    tensors = _ties_driver(
        models, base, opts, lambda name, inputs: inputs, weights_for, threads
    )
    logger.info("TIES merge of %d models (%s)", len(models), opts.describe())
    return _finish(
        tensors, models[0], output_dtype, {"method": "ties", **opts.describe()}
    )


# DARE -----------------------------------------------------------------------


def _philox(seed: int, name: str, model_index: int) -> np.random.Generator:
    digest = hashlib.blake2b(
        f"{model_index}:{name}".encode("utf-8"), digest_size=8
    ).digest()
    key = np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


def dare_mask(
    name: str, shape: Sequence[int], opts: DareOptions, model_index: int = 0
) -> np.ndarray:
    """Keep-mask for one tensor; element i depends only on (seed, name, model, i)."""
    size = math.prod(shape)
    uniforms = _philox(opts.rng_seed, name, model_index).random(size)
    return (uniforms >= opts.drop_prob).reshape(tuple(shape))


def apply_dare_mask(
    delta: np.ndarray, keep: np.ndarray, drop_prob: float
) -> np.ndarray:
    delta = np.asarray(delta)
    scale = 1.0 / (1.0 - drop_prob)
    return np.where(keep, delta * scale, 0.0).astype(delta.dtype)


def dare_drop_rescale(
    delta: np.ndarray, opts: DareOptions, name: str = "", model_index: int = 0
) -> np.ndarray:
    if opts.drop_prob == 0:
        return np.asarray(delta).copy()
    keep = dare_mask(name, np.shape(delta), opts, model_index)
    return apply_dare_mask(delta, keep, opts.drop_prob)


def dare_ties_merge(
    models: Sequence[TensorArchive],
    base: TensorArchive,
    ties_opts: TiesOptions = TiesOptions(),
    dare_opts: DareOptions = DareOptions(),
    weights_for: Optional[WeightSource] = None,
    threads: int = 1,
    output_dtype: str = "auto",
) -> TensorArchive:
    if ties_opts.apply_to is ApplyTo.RAW:
        raise RecipeInvalid("apply_to", "DARE-TIES drops delta parameters only")

    def drop(name, inputs):
        return [
            dare_drop_rescale(delta, dare_opts, name, i)
            for i, delta in enumerate(inputs)
        ]

    tensors = _ties_driver(models, base, ties_opts, drop, weights_for, threads)
    logger.info(
        "DARE-TIES merge of %d models (%s, %s)",
        len(models),
        ties_opts.describe(),
        dare_opts.describe(),
    )
    recipe = {"method": "dare_ties", **ties_opts.describe(), **dare_opts.describe()}
    return _finish(tensors, models[0], output_dtype, recipe)

