"""Local features from per-part convolutional maps and the
activation-norm filter applied before estimation and encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DimensionMismatchError, FeatureBatch


@dataclass(frozen=True)
class ConvMapStack:
    """P part maps of shape C x H x W belonging to one image."""

    maps: np.ndarray     # (P, C, H, W)
    image_id: int = 0

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        object.__setattr__(self, "maps", maps)
        if maps.ndim != 4 or min(maps.shape) < 1:
            raise DimensionMismatchError(f"maps must be (P, C, H, W), got {maps.shape}")
        if not np.all(np.isfinite(maps)):
            raise ValueError("conv maps contain non-finite values")


@dataclass(frozen=True)
class FilterReport:
    kept: int
    dropped: int
    threshold: float
    fallback_used: bool


def flatten_convmaps(stack: ConvMapStack) -> FeatureBatch:
    """One row per spatial cell of each part: P*H*W rows of dimension C,
    in part-major then row-major spatial order."""
    p, c, h, w = stack.maps.shape
    rows = stack.maps.transpose(0, 2, 3, 1).reshape(p * h * w, c)
    groups = np.full(p * h * w, stack.image_id, dtype=np.int64)
    part_ids = np.repeat(np.arange(p, dtype=np.int64), h * w)
    return FeatureBatch(rows.copy(), groups, part_ids)


def filter_by_norm(batch: FeatureBatch) -> tuple[FeatureBatch, dict[int, FilterReport]]:
    """Per image, keep rows whose L2 norm is strictly greater than the
    image's mean L2 norm. If that would empty the image (all norms
    equal), keep everything and flag the fallback."""
    norms = np.linalg.norm(batch.data, axis=1)
    keep = np.zeros(batch.n, dtype=bool)
    reports: dict[int, FilterReport] = {}
    for gid in batch.group_ids():
        sel = batch.groups == gid
        thr = float(np.mean(norms[sel]))
        kept = sel & (norms > thr)
        fallback = not np.any(kept)
        if fallback:
            kept = sel
        keep |= kept
        n_kept = int(np.count_nonzero(kept))
        reports[int(gid)] = FilterReport(
            kept=n_kept,
            dropped=int(np.count_nonzero(sel)) - n_kept,
            threshold=thr,
            fallback_used=fallback,
        )
    filtered = FeatureBatch(
        batch.data[keep],
        batch.groups[keep],
        None if batch.part_ids is None else batch.part_ids[keep],
    )
    return filtered, reports
