"""Class-map algebra: combined rib probability, argmax labels, voxel-wise metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import ProbabilityMap, VoxelGrid, _as_triple


@dataclass(frozen=True)
class LabelGrid:
    """Integer class labels (0..3) on a regular grid."""

    dims: tuple
    spacing: tuple
    origin: tuple
    values: np.ndarray

    def __post_init__(self):
        geom = VoxelGrid(
            self.dims, self.spacing, self.origin, np.zeros(_as_triple(self.dims, "dims"))
        )
        object.__setattr__(self, "dims", geom.dims)
        object.__setattr__(self, "spacing", geom.spacing)
        object.__setattr__(self, "origin", geom.origin)
        values = np.asarray(self.values)
        if values.size != np.prod(self.dims):
            raise ValueError("values length does not match dims")
        if not np.issubdtype(values.dtype, np.integer):
            ivalues = np.asarray(values, dtype=np.int64)
            if not np.array_equal(ivalues, values):
                raise ValueError("labels must be integers")
            values = ivalues
        if values.min() < 0 or values.max() > 3:
            raise ValueError("labels must lie in {0, 1, 2, 3}")
        values = values.reshape(self.dims).astype(np.uint8)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def same_geometry(self, other: "LabelGrid") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


@dataclass(frozen=True)
class ClassCounts:
    """True/false positive and false negative voxel counts for one class."""

    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")


def combined_probability(pmap: ProbabilityMap) -> VoxelGrid:
    """Rib-ness field: the three non-background channels summed, clamped at 1."""
    q = np.minimum(pmap.channels[1] + pmap.channels[2] + pmap.channels[3], 1.0)
    return VoxelGrid(pmap.dims, pmap.spacing, pmap.origin, q)


def argmax_labels(pmap: ProbabilityMap) -> LabelGrid:
    """Per-voxel class of maximal response; ties go to the smallest class index."""
    labels = np.argmax(pmap.channels, axis=0)  # np.argmax returns the first maximum
    return LabelGrid(pmap.dims, pmap.spacing, pmap.origin, labels)


def class_counts(pred: LabelGrid, gt: LabelGrid, cls: int) -> ClassCounts:
    if not pred.same_geometry(gt):
        raise ValueError("pred and gt label grids have different geometry")
    p = pred.values == cls
    g = gt.values == cls
    return ClassCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def counts_to_metrics(tp: int, fp: int, fn: int) -> tuple:
    """(sensitivity, precision, dice) from counts; 0/0 ratios come back as None.

    Single source of truth for these ratios; the centerline evaluation reuses
    it on point counts.
    """
    sens = tp / (tp + fn) if tp + fn > 0 else None
    prec = tp / (tp + fp) if tp + fp > 0 else None
    dice = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else None
    return sens, prec, dice


def voxel_metrics(pred: LabelGrid, gt: LabelGrid, cls: int) -> tuple:
    """Sensitivity, precision and Dice for one class; None where undefined."""
    c = class_counts(pred, gt, cls)
    return counts_to_metrics(c.tp, c.fp, c.fn)


def merge_rib_classes(grid: LabelGrid) -> LabelGrid:
    """Collapse the three rib classes into one: labels 1,2,3 -> 1, 0 stays 0."""
    return LabelGrid(
        grid.dims, grid.spacing, grid.origin, (grid.values > 0).astype(np.uint8)
    )
