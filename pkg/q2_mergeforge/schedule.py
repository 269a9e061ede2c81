# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from ._errors import BadCoefficient, UnknownTensor

_INT_SEGMENT = re.compile(r"[0-9]+")


@dataclass(frozen=True)
class BlendSchedule:
    """Anchor blend ratios stretched across layer depth.

    A ratio is the fraction of Model 1 at that depth: anchors ``[0, 0.5, 1]``
    start with Model 2 only and end with Model 1 only.
    """

    anchors: Sequence[float]
    default_t: Optional[float] = None

    def __post_init__(self):
        anchors = tuple(float(a) for a in self.anchors)
        if not anchors:
            raise BadCoefficient("A blend schedule needs at least one anchor")
        if any(not 0.0 <= a <= 1.0 for a in anchors):
            raise BadCoefficient(f"Blend anchors must lie in [0, 1]: {list(anchors)}")
        if self.default_t is not None and not 0.0 <= self.default_t <= 1.0:
            raise BadCoefficient(f"default_t must lie in [0, 1]: {self.default_t}")
        object.__setattr__(self, "anchors", anchors)

    @property
    def unlayered_t(self) -> float:
        if self.default_t is not None:
            return float(self.default_t)
        return eval_schedule(self, 0.5)


def eval_schedule(s: BlendSchedule, position: float) -> float:
    if not 0.0 <= position <= 1.0:
        raise BadCoefficient(f"Schedule position must lie in [0, 1]: {position}")
    if len(s.anchors) == 1:
        return s.anchors[0]
    xs = np.linspace(0.0, 1.0, len(s.anchors))
    return float(np.interp(position, xs, s.anchors))


def layer_index_of(name: str) -> Optional[int]:
    for segment in name.split("."):
        if _INT_SEGMENT.fullmatch(segment):
            return int(segment)
    return None


@dataclass(frozen=True)
class LayerMap:
    entries: Dict[str, Optional[int]] = field(default_factory=dict)

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "LayerMap":
        return cls({name: layer_index_of(name) for name in names})

    @property
    def layer_count(self) -> int:
        indices = [i for i in self.entries.values() if i is not None]
        return max(indices) + 1 if indices else 0


def per_tensor_t(s: BlendSchedule, lm: LayerMap, name: str) -> float:
    if name not in lm.entries:
        raise UnknownTensor(f"Tensor {name!r} is not in the layer map")
    index = lm.entries[name]
    if index is None:
        return s.unlayered_t
    count = lm.layer_count
    position = index / (count - 1) if count > 1 else 0.0
    return eval_schedule(s, position)


def schedule_trace(s: BlendSchedule, lm: LayerMap) -> Dict[str, float]:
    """Blend ratio per layer index (as strings) plus the unlayered value."""
    trace = {}
    for index in sorted({i for i in lm.entries.values() if i is not None}):
        count = lm.layer_count
        trace[str(index)] = eval_schedule(s, index / (count - 1) if count > 1 else 0.0)
    if any(i is None for i in lm.entries.values()):
        trace["default"] = s.unlayered_t
    return trace
