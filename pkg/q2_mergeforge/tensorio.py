# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from ._errors import (
    IncompatibleArchives,
    InvariantViolation,
    IoFailure,
    MalformedHeader,
    OffsetOverlap,
    UnknownDtype,
)

logger = logging.getLogger(__name__)

DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}
METADATA_KEY = "__metadata__"
HEADER_ALIGNMENT = 8
PREFIX_SIZE = 8

PathLike = Union[str, os.PathLike]


def dtype_name(array: np.ndarray) -> str:
    """Return the archive dtype tag ("F32" or "F16") of a numpy array."""
    for name, dtype in DTYPES.items():
        if array.dtype == dtype:
            return name
    raise UnknownDtype(f"Unsupported tensor dtype: {array.dtype}")


def _check_name(name) -> Optional[str]:
    if not isinstance(name, str) or not name:
        return "tensor names must be non-empty strings"
    if name == METADATA_KEY:
        return f"{METADATA_KEY!r} is reserved for archive metadata"
    if any(ord(c) < 0x20 or 0x7F <= ord(c) < 0xA0 for c in name):
        return f"tensor name {name!r} contains control characters"
    return None


def _frozen(array: np.ndarray) -> np.ndarray:
    view = array.view()
    view.flags.writeable = False
    return view


class TensorArchive:
    """Named collection of dense F32/F16 tensors plus a string metadata map.

    Tensors are stored as read-only numpy views; an archive is never
    mutated after construction, so it can be shared between threads.
    """

    def __init__(
        self,
        tensors: Optional[Mapping[str, np.ndarray]] = None,
        metadata: Optional[Mapping[str, str]] = None,
        source: str = "",
    ):
        self._tensors: Dict[str, np.ndarray] = {}
        for name in sorted(tensors or {}):
            problem = _check_name(name)
            if problem:
                raise InvariantViolation(problem)
            array = np.asarray(tensors[name])
            dtype_name(array)
            self._tensors[name] = _frozen(np.require(array, requirements="C"))

        self.metadata: Dict[str, str] = {}
        for key, value in (metadata or {}).items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise InvariantViolation("archive metadata must map str to str")
            self.metadata[key] = value
        self.source = source

    @classmethod
    def from_items(
        cls,
        items: Iterable[Tuple[str, np.ndarray]],
        metadata: Optional[Mapping[str, str]] = None,
        source: str = "",
    ) -> "TensorArchive":
        tensors = {}
        for name, array in items:
            if name in tensors:
                raise InvariantViolation(f"Duplicate tensor name: {name!r}")
            tensors[name] = array
        return cls(tensors, metadata, source)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def dtype_of(self, name: str) -> str:
        return dtype_name(self._tensors[name])

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(arr.shape) for name, arr in self._tensors.items()}

    def with_metadata(self, **updates: str) -> "TensorArchive":
        metadata = {**self.metadata, **updates}
        return TensorArchive(self._tensors, metadata, self.source)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorArchive):
            return NotImplemented
        if self.metadata != other.metadata or self.names() != other.names():
            return False
        for name, array in self.items():
            theirs = other[name]
            if array.dtype != theirs.dtype or array.shape != theirs.shape:
                return False
            if array.tobytes() != theirs.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        return (
            f"TensorArchive(tensors={len(self)}, metadata={sorted(self.metadata)}, "
            f"source={self.source!r})"
        )


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    data_offsets: Tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


@dataclass(frozen=True)
class ArchiveHeader:
    header_size: int
    entries: Tuple[TensorEntry, ...]
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def data_start(self) -> int:
        return PREFIX_SIZE + self.header_size


def _no_duplicate_keys(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise MalformedHeader(f"Duplicate key in header: {key!r}")
        obj[key] = value
    return obj


def _is_uint(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _parse_entry(name, meta) -> TensorEntry:
    problem = _check_name(name)
    if problem:
        raise MalformedHeader(problem)
    if not isinstance(meta, dict):
        raise MalformedHeader(f"Invalid tensor entry for {name!r}")
    dtype, shape = meta.get("dtype"), meta.get("shape")
    offsets = meta.get("data_offsets")
    if not isinstance(dtype, str):
        raise MalformedHeader(f"Missing dtype for {name!r}")
    if dtype not in DTYPES:
        raise UnknownDtype(f"Unknown dtype {dtype!r} for {name!r}")
    if not isinstance(shape, list) or not all(_is_uint(d) for d in shape):
        raise MalformedHeader(f"Invalid shape for {name!r}")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(_is_uint(o) for o in offsets)
    ):
        raise MalformedHeader(f"Invalid data_offsets for {name!r}")
    return TensorEntry(name, dtype, tuple(shape), (offsets[0], offsets[1]))


def _check_offsets(entries: List[TensorEntry], buffer_size: int) -> None:
    for entry in entries:
        begin, end = entry.data_offsets
        if begin > end:
            raise OffsetOverlap(f"{entry.name}: begin offset {begin} > end {end}")
        if end > buffer_size:
            raise OffsetOverlap(
                f"{entry.name}: byte range [{begin}, {end}) exceeds the "
                f"{buffer_size}-byte data buffer"
            )
        expected = math.prod(entry.shape) * DTYPES[entry.dtype].itemsize
        if entry.nbytes != expected:
            raise OffsetOverlap(
                f"{entry.name}: byte range holds {entry.nbytes} bytes, "
                f"shape {list(entry.shape)} needs {expected}"
            )
    by_begin = sorted(entries, key=lambda e: e.data_offsets)
    for prev, cur in zip(by_begin, by_begin[1:]):
        if cur.nbytes and cur.data_offsets[0] < prev.data_offsets[1]:
            raise OffsetOverlap(f"Byte ranges of {prev.name} and {cur.name} overlap")


def parse_header(buf: memoryview, file_size: int) -> ArchiveHeader:
    """Parse and validate the length prefix and header of an archive buffer."""
    if file_size < PREFIX_SIZE:
        raise MalformedHeader("File too small for the header length prefix")
    (header_size,) = struct.unpack_from("<Q", buf, 0)
    if PREFIX_SIZE + header_size > file_size:
        raise MalformedHeader(
            f"Header length {header_size} extends beyond the end of the file"
        )
    raw = bytes(buf[PREFIX_SIZE : PREFIX_SIZE + header_size])
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_no_duplicate_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"Header is not well-formed: {e}") from e
    if not isinstance(header, dict):
        raise MalformedHeader("Header must be an object")

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader(f"{METADATA_KEY} must map strings to strings")

    entries = [_parse_entry(name, meta) for name, meta in header.items()]
    _check_offsets(entries, file_size - PREFIX_SIZE - header_size)
    entries.sort(key=lambda e: e.name)
    return ArchiveHeader(header_size, tuple(entries), dict(metadata))


def read_header(path: PathLike) -> ArchiveHeader:
    """Read only the header of an archive file."""
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(PREFIX_SIZE)
            size = os.fstat(fh.fileno()).st_size
            if len(prefix) < PREFIX_SIZE:
                raise MalformedHeader("File too small for the header length prefix")
            (header_size,) = struct.unpack("<Q", prefix)
            if PREFIX_SIZE + header_size > size:
                raise MalformedHeader(
                    f"Header length {header_size} extends beyond the end of the file"
                )
            buf = prefix + fh.read(header_size)
    except OSError as e:
        raise IoFailure(f"Cannot read {path}: {e}") from e
    # offsets are checked against the real file size, not the bytes read
    return parse_header(memoryview(buf), size)


def read_archive(path: PathLike, lazy: bool = False) -> TensorArchive:
    """
    Read a tensor archive from disk.

    Parameters
    ----------
    path : str or os.PathLike
        Path to a single-file archive.
    lazy : bool, optional
        Memory-map the data buffer instead of reading it into memory. Tensors
        are then read-only views into the file.

    Returns
    -------
    TensorArchive
        Tensors in sorted name order, with ``source`` set to ``path``.

    Raises
    ------
    IoFailure
        If the file cannot be opened.
    MalformedHeader, UnknownDtype, OffsetOverlap
        If the header fails validation.
    """

    try:
        if lazy and os.path.getsize(path) >= PREFIX_SIZE:
            buffer = np.memmap(path, dtype=np.uint8, mode="r")
        else:
            buffer = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise IoFailure(f"Cannot read {path}: {e}") from e

    header = parse_header(memoryview(buffer), buffer.size)
    tensors = {}
    for entry in header.entries:
        begin, end = entry.data_offsets
        raw = buffer[header.data_start + begin : header.data_start + end]
        tensors[entry.name] = raw.view(DTYPES[entry.dtype]).reshape(entry.shape)
    logger.debug("Read %d tensors from %s (lazy=%s)", len(tensors), path, lazy)
    return TensorArchive(tensors, header.metadata, source=str(path))


def encode_header(archive: TensorArchive) -> bytes:
    """Canonical header bytes: sorted names, packed offsets, space padding."""
    header = {}
    if archive.metadata:
        header[METADATA_KEY] = dict(sorted(archive.metadata.items()))
    offset = 0
    for name, array in archive.items():
        header[name] = {
            "dtype": dtype_name(array),
            "shape": list(array.shape),
            "data_offsets": [offset, offset + array.nbytes],
        }
        offset += array.nbytes
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode()
    return text + b" " * (-len(text) % HEADER_ALIGNMENT)


def write_archive(archive: TensorArchive, path: PathLike) -> None:
    header = encode_header(archive)
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for _, array in archive.items():
                fh.write(array.tobytes(order="C"))
    except OSError as e:
        raise IoFailure(f"Cannot write {path}: {e}") from e
    logger.debug("Wrote %d tensors to %s", len(archive), path)


def cast(array: np.ndarray, target: str) -> np.ndarray:
    """Cast a tensor to ``target`` ("F32"/"F16"); F32 -> F16 rounds to nearest-even."""
    if target not in DTYPES:
        raise UnknownDtype(f"Unknown dtype {target!r}")
    if array.dtype == DTYPES[target]:
        return array
    return array.astype(DTYPES[target])


@dataclass
class CompatReport:
    """Structural differences between archives; indices are list positions."""

    missing: List[Tuple[str, int]] = field(default_factory=list)
    shape_mismatches: List[Tuple[str, int, Tuple[int, ...], Tuple[int, ...]]] = field(
        default_factory=list
    )

    @property
    def ok(self) -> bool:
        return not self.missing and not self.shape_mismatches

    def summary(self) -> str:
        if self.ok:
            return "OK"
        parts = [f"{name!r} missing in archive {i + 1}" for name, i in self.missing]
        parts += [
            f"{name!r} has shape {list(shape)} in archive {i + 1}, expected {list(ref)}"
            for name, i, shape, ref in self.shape_mismatches
        ]
        return "; ".join(parts)


def validate_compat(archives: List[TensorArchive]) -> CompatReport:
    if not archives:
        raise ValueError("validate_compat needs at least one archive")
    report = CompatReport()
    names = sorted(set().union(*(a.names() for a in archives)))
    for name in names:
        reference = None
        for i, archive in enumerate(archives):
            if name not in archive:
                report.missing.append((name, i))
                continue
            shape = tuple(archive[name].shape)
            if reference is None:
                reference = shape
            elif shape != reference:
                report.shape_mismatches.append((name, i, shape, reference))
    return report


def ensure_compatible(archives: List[TensorArchive]) -> None:
    report = validate_compat(archives)
    if not report.ok:
        raise IncompatibleArchives(report)
