"""Labelled point sets, their on-disk formats, and class-balance helpers."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Space",
    "FeatureDataset",
    "ClassStats",
    "PoisonLedger",
    "DatasetFormatError",
    "load_dataset",
    "save_dataset",
    "class_stats",
    "resolve_k",
    "replicate_minorities",
]


class Space(str, enum.Enum):
    INPUT = "input"
    FEATURE = "feature"


_SPACE_CODES = {Space.INPUT: 0, Space.FEATURE: 1}
_MAGIC = b"FPDS"
_VERSION = 1
_HEADER = struct.Struct("<4sHBIQI")


class DatasetFormatError(ValueError):
    """Raised when a dataset file or constructor argument is malformed."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """Immutable matrix of vectors with dense integer labels and stable ids.

    ``provenance`` maps every id to the id of the point it was copied from;
    it is the identity for original points and is only populated by
    :func:`replicate_minorities`.
    """

    points: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    space: Space = Space.FEATURE
    num_classes: int | None = None
    provenance: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        ids = np.array(self.ids, dtype=np.int64).reshape(-1)
        if points.ndim == 1 and points.size == 0:
            points = points.reshape(0, 1)
        if points.ndim != 2:
            raise DatasetFormatError("points must be a 2-D array")
        n, d = points.shape
        if d < 1:
            raise DatasetFormatError("dimension must be >= 1")
        if labels.shape[0] != n or ids.shape[0] != n:
            raise DatasetFormatError(
                f"length mismatch: {n} points, {labels.shape[0]} labels, {ids.shape[0]} ids"
            )
        if not np.all(np.isfinite(points)):
            raise DatasetFormatError("points contain non-finite values")
        if n and labels.min() < 0:
            raise DatasetFormatError("labels must be non-negative")
        if np.unique(ids).shape[0] != n:
            raise DatasetFormatError("ids must be unique")
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if n else 0
        elif n and labels.max() >= num_classes:
            raise DatasetFormatError(
                f"label {int(labels.max())} >= declared class count {num_classes}"
            )
        object.__setattr__(self, "points", _readonly(points))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "space", Space(self.space))
        object.__setattr__(self, "num_classes", int(num_classes))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.space == other.space
            and self.num_classes == other.num_classes
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.points, other.points)
        )

    def index_of(self, point_id: int) -> int:
        hits = np.flatnonzero(self.ids == point_id)
        if hits.size == 0:
            raise KeyError(f"id {point_id} not in dataset")
        return int(hits[0])

    def select(self, mask_or_index) -> "FeatureDataset":
        """Subset by boolean mask or integer positions; ids are preserved."""
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        prov = {int(i): self.provenance.get(int(i), int(i)) for i in self.ids[idx]}
        return FeatureDataset(
            self.points[idx],
            self.labels[idx],
            self.ids[idx],
            self.space,
            self.num_classes,
            prov if self.provenance else {},
        )

    def keep_ids(self, ids) -> "FeatureDataset":
        return self.select(np.isin(self.ids, np.fromiter(ids, dtype=np.int64)))

    def with_points(self, points, space: Space | None = None) -> "FeatureDataset":
        return FeatureDataset(
            points,
            self.labels,
            self.ids,
            self.space if space is None else space,
            self.num_classes,
            dict(self.provenance),
        )

    def append(self, points, labels, ids=None) -> "FeatureDataset":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if ids is None:
            start = int(self.ids.max()) + 1 if len(self) else 0
            ids = np.arange(start, start + points.shape[0])
        return FeatureDataset(
            np.vstack([self.points, points]) if len(self) else points,
            np.concatenate([self.labels, np.asarray(labels, dtype=np.int64)]),
            np.concatenate([self.ids, np.asarray(ids, dtype=np.int64)]),
            self.space,
            self.num_classes,
        )


@dataclass(frozen=True)
class ClassStats:
    counts: tuple[int, ...]

    @property
    def max_count(self) -> int:
        return max(self.counts, default=0)

    @property
    def min_count(self) -> int:
        return min(self.counts, default=0)


@dataclass(frozen=True)
class PoisonLedger:
    """Ground truth known to the harness only; filters never receive it."""

    poison_ids: frozenset[int]
    target_id: int
    base_label: int
    target_label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "poison_ids", frozenset(int(i) for i in self.poison_ids))
        if self.target_id in self.poison_ids:
            raise ValueError("target id cannot be a poison id")
        if self.base_label == self.target_label:
            raise ValueError("base and target labels must differ")


# ---------------------------------------------------------------------------
# file I/O


def _parse_header(line: str) -> tuple[int, int, Space]:
    fields = {}
    for part in line.strip().split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise DatasetFormatError(f"row 0: malformed header field {part!r}")
        fields[key.strip()] = value.strip()
    try:
        d, c, space = int(fields["d"]), int(fields["C"]), Space(fields["space"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"row 0: malformed header {line.strip()!r}") from exc
    if d < 1 or c < 0:
        raise DatasetFormatError(f"row 0: invalid header values d={d}, C={c}")
    return d, c, space


def _load_csv(path: Path) -> FeatureDataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise DatasetFormatError("row 0: missing header")
        d, c, space = _parse_header(header)
        ids, labels, rows = [], [], []
        for rowno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            cells = line.strip().split(",")
            if len(cells) != d + 2:
                raise DatasetFormatError(
                    f"row {rowno}: expected {d + 2} columns, found {len(cells)}"
                )
            try:
                pid, lab = int(cells[0]), int(cells[1])
                vals = [float(v) for v in cells[2:]]
            except ValueError as exc:
                raise DatasetFormatError(f"row {rowno}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise DatasetFormatError(f"row {rowno}: non-finite value")
            if not 0 <= lab < c:
                raise DatasetFormatError(f"row {rowno}: label {lab} outside [0, {c})")
            ids.append(pid)
            labels.append(lab)
            rows.append(vals)
    points = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return FeatureDataset(points, labels, ids, space, c)


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("values", "<f4", (d,))])


def _load_binary(path: Path) -> FeatureDataset:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("row 0: truncated header")
    magic, version, code, c, n, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise DatasetFormatError("row 0: bad magic or version")
    spaces = {v: k for k, v in _SPACE_CODES.items()}
    if code not in spaces or d < 1:
        raise DatasetFormatError("row 0: malformed header")
    dt = _record_dtype(d)
    body = raw[_HEADER.size :]
    if len(body) != n * dt.itemsize:
        raise DatasetFormatError(
            f"row {len(body) // dt.itemsize + 1}: expected {n} records of {dt.itemsize} bytes"
        )
    rec = np.frombuffer(body, dtype=dt, count=n)
    values = rec["values"].astype(np.float64)
    bad = ~np.all(np.isfinite(values), axis=1) if n else np.zeros(0, bool)
    if bad.any():
        raise DatasetFormatError(f"row {int(np.argmax(bad)) + 1}: non-finite value")
    over = rec["label"] >= c
    if over.any():
        raise DatasetFormatError(f"row {int(np.argmax(over)) + 1}: label >= declared C={c}")
    return FeatureDataset(
        values.reshape(n, d), rec["label"].astype(np.int64), rec["id"].astype(np.int64), spaces[code], c
    )


def load_dataset(path, format: str = "csv") -> FeatureDataset:
    """Read a dataset written by :func:`save_dataset`.

    Errors name the offending row (row 0 is the header).
    """
    path = Path(path)
    if format == "csv":
        return _load_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown dataset format {format!r}")


def save_dataset(ds: FeatureDataset, path, format: str = "csv") -> None:
    """Write ``ds``; binary stores values as float32, csv with 9 significant digits."""
    path = Path(path)
    try:
        if format == "csv":
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(f"d={ds.dim},C={ds.num_classes},space={ds.space.value}\n")
                for pid, lab, row in zip(ds.ids, ds.labels, ds.points):
                    vals = ",".join(f"{v:.9g}" for v in row)
                    fh.write(f"{int(pid)},{int(lab)},{vals}\n")
        elif format == "binary":
            n, d = ds.points.shape
            rec = np.zeros(n, dtype=_record_dtype(d))
            rec["id"] = ds.ids
            rec["label"] = ds.labels
            rec["values"] = ds.points
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(_MAGIC, _VERSION, _SPACE_CODES[ds.space], ds.num_classes, n, d))
                fh.write(rec.tobytes())
        else:
            raise ValueError(f"unknown dataset format {format!r}")
    except OSError as exc:
        raise OSError(f"failed to write dataset to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# class balance


def class_stats(ds: FeatureDataset) -> ClassStats:
    counts = np.bincount(ds.labels, minlength=ds.num_classes) if len(ds) else np.zeros(ds.num_classes, int)
    return ClassStats(tuple(int(c) for c in counts))


def resolve_k(normalized_k: float, stats: ClassStats) -> int:
    """Convert ``k / N`` back to a neighbour count, rounding half up, at least 1."""
    if not normalized_k > 0:
        raise ValueError(f"normalized_k must be positive, got {normalized_k}")
    if stats.max_count < 1:
        raise ValueError("dataset has no points")
    # tiny guard keeps e.g. 0.2 * 50 from landing on 9.999999
    return max(1, int(math.floor(normalized_k * stats.max_count + 0.5 + 1e-9)))


def replicate_minorities(ds: FeatureDataset) -> FeatureDataset:
    """Top every class up to the size of the largest one by duplicating points.

    A class of size ``n`` is copied ``N // n`` times in whole, then the
    ``N - n * (N // n)`` lowest-id points are duplicated once more.  Replicas
    get fresh ids above the current maximum; ``provenance`` maps each replica
    to the id it copies.
    """
    stats = class_stats(ds)
    target = stats.max_count
    if target == 0:
        raise ValueError("replication needs at least one non-empty class")
    provenance = {int(i): int(i) for i in ds.ids}
    next_id = int(ds.ids.max()) + 1
    new_idx: list[int] = []
    for label, n in enumerate(stats.counts):
        if n == 0 or n == target:
            continue
        members = np.flatnonzero(ds.labels == label)
        members = members[np.argsort(ds.ids[members], kind="stable")]
        whole, rest = divmod(target, n)
        new_idx.extend(np.tile(members, whole - 1).tolist())
        new_idx.extend(members[:rest].tolist())
    if not new_idx:
        return FeatureDataset(ds.points, ds.labels, ds.ids, ds.space, ds.num_classes, provenance)
    new_idx_arr = np.asarray(new_idx, dtype=np.int64)
    new_ids = np.arange(next_id, next_id + new_idx_arr.size)
    for rid, src in zip(new_ids, ds.ids[new_idx_arr]):
        provenance[int(rid)] = int(src)
    return FeatureDataset(
        np.vstack([ds.points, ds.points[new_idx_arr]]),
        np.concatenate([ds.labels, ds.labels[new_idx_arr]]),
        np.concatenate([ds.ids, new_ids]),
        ds.space,
        ds.num_classes,
        provenance,
    )


def stack(parts: Sequence[FeatureDataset]) -> FeatureDataset:
    """Concatenate datasets sharing dimension and space; ids must stay unique."""
    parts = [p for p in parts if len(p)]
    first = parts[0]
    return FeatureDataset(
        np.vstack([p.points for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.ids for p in parts]),
        first.space,
        max(p.num_classes for p in parts),
    )
