"""Common result type for training-set filters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .dataset import FeatureDataset


@dataclass(frozen=True)
class FilterReport:
    kept_ids: frozenset[int]
    removed_ids: frozenset[int]
    defense_name: str
    parameters: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mask(cls, ds: FeatureDataset, keep: np.ndarray, name: str, **params) -> "FilterReport":
        keep = np.asarray(keep, dtype=bool)
        return cls(
            frozenset(int(i) for i in ds.ids[keep]),
            frozenset(int(i) for i in ds.ids[~keep]),
            name,
            params,
        )

    @classmethod
    def removing(cls, ds: FeatureDataset, removed: Iterable[int], name: str, **params) -> "FilterReport":
        removed = frozenset(int(i) for i in removed)
        kept = frozenset(int(i) for i in ds.ids) - removed
        return cls(kept, removed, name, params)

    @property
    def per_point_verdict(self) -> dict[int, str]:
        verdict = {i: "kept" for i in self.kept_ids}
        verdict.update({i: "removed" for i in self.removed_ids})
        return verdict

    def partitions(self, ds: FeatureDataset) -> bool:
        universe = {int(i) for i in ds.ids}
        return not (self.kept_ids & self.removed_ids) and (self.kept_ids | self.removed_ids) == universe

    def apply(self, ds: FeatureDataset) -> FeatureDataset:
        return ds.keep_ids(self.kept_ids)

    def to_dict(self) -> dict[str, Any]:
        return {
            "defense": self.defense_name,
            "params": self.parameters,
            "kept": sorted(self.kept_ids),
            "removed": sorted(self.removed_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "FilterReport":
        return cls(frozenset(doc["kept"]), frozenset(doc["removed"]), doc["defense"], dict(doc.get("params", {})))


def no_filter(ds: FeatureDataset) -> FilterReport:
    return FilterReport.from_mask(ds, np.ones(len(ds), bool), "none")
