# flake8: noqa
# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------

try:
    from ._version import __version__
except ModuleNotFoundError:
    __version__ = "0.0.0+notfound"

from .merge import (
    apply_delta,
    compute_delta,
    merge_dare_ties,
    merge_linear,
    merge_slerp,
    merge_ties,
    metrics_report,
)

__all__ = [
    "merge_linear",
    "merge_slerp",
    "merge_ties",
    "merge_dare_ties",
    "compute_delta",
    "apply_delta",
    "metrics_report",
]
