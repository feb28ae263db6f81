"""Batches of local feature vectors with per-image group tags."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .config import deterministic_reductions


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureBatch:
    """An N x D matrix of local features, each row tagged with the image
    (group) it belongs to and optionally with a part index."""

    data: np.ndarray            # (N, D) float64
    groups: np.ndarray          # (N,) int64 group ids
    part_ids: Optional[np.ndarray] = None   # (N,) int64

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        groups = np.asarray(self.groups, dtype=np.int64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "groups", groups)
        if data.ndim != 2 or data.shape[0] < 1:
            raise DimensionMismatchError(f"data must be (N, D) with N >= 1, got {data.shape}")
        if groups.shape != (data.shape[0],):
            raise DimensionMismatchError("groups must have one entry per row")
        if self.part_ids is not None:
            pid = np.asarray(self.part_ids, dtype=np.int64)
            if pid.shape != (data.shape[0],):
                raise DimensionMismatchError("part_ids must have one entry per row")
            object.__setattr__(self, "part_ids", pid)
        if not np.all(np.isfinite(data)):
            raise ValueError("feature batch contains non-finite values")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def group_ids(self) -> np.ndarray:
        # unique ids in first-appearance order
        _, idx = np.unique(self.groups, return_index=True)
        return self.groups[np.sort(idx)]

    def iter_groups(self) -> Iterator[tuple[int, np.ndarray]]:
        for gid in self.group_ids():
            yield int(gid), self.data[self.groups == gid]

    @staticmethod
    def single_group(data: np.ndarray, group_id: int = 0) -> "FeatureBatch":
        data = np.asarray(data, dtype=np.float64)
        return FeatureBatch(data, np.full(data.shape[0], group_id, dtype=np.int64))


def reduce_rows(values: np.ndarray) -> np.ndarray:
    """Sum over axis 0. In deterministic mode the addends of each column
    are sorted first so the result is exactly invariant to row order."""
    if deterministic_reductions():
        return np.sum(np.sort(values, axis=0), axis=0)
    return np.sum(values, axis=0)
