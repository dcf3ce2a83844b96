"""Centerline evaluation: point matching within a tolerance, missed-rib
counting, and pooled per-rib reports (JSON and aligned text table)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .centerline import (
    CenterlineSet,
    parse_label,
    points_to_polyline_distances,
    resample_arclength,
)
from .probmap import counts_to_metrics

DEFAULT_DELTA_MM = 5.0
_RESAMPLE_STEP_MM = 1.0


@dataclass
class LabelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    sum_distance: float = 0.0
    n_distance: int = 0

    def add(self, other: "LabelCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.sum_distance += other.sum_distance
        self.n_distance += other.n_distance


@dataclass
class MatchCounts:
    """Point-match counts per rib label, plus helpers to pool and aggregate."""

    per_label: dict = field(default_factory=dict)

    def label(self, name: str) -> LabelCounts:
        if name not in self.per_label:
            self.per_label[name] = LabelCounts()
        return self.per_label[name]

    def merge(self, other: "MatchCounts") -> None:
        for name, counts in other.per_label.items():
            self.label(name).add(counts)

    def aggregate(self) -> LabelCounts:
        total = LabelCounts()
        for counts in self.per_label.values():
            total.add(counts)
        return total


def _resampled_by_label(lines: CenterlineSet):
    """(points per label, polylines per label) after 1 mm resampling."""
    points = {}
    polylines = {}
    for rib in lines.ribs:
        pts = resample_arclength(rib.points, _RESAMPLE_STEP_MM)
        points.setdefault(rib.label, []).append(pts)
        polylines.setdefault(rib.label, []).append(rib.points)
    points = {k: np.vstack(v) for k, v in points.items()}
    return points, polylines


def match_centerlines(pred: CenterlineSet, gt: CenterlineSet, delta: float = DEFAULT_DELTA_MM) -> MatchCounts:
    """Label-aware point matching at tolerance delta.

    A ground-truth point with no same-label prediction point within delta is
    a false negative; a prediction point with a same-label ground-truth point
    within delta is a true positive (accumulating its distance to the
    ground-truth polylines of that label), otherwise a false positive.
    Unlabeled prediction points match nothing.
    """
    gt_points, gt_lines = _resampled_by_label(gt)
    pred_points, _ = _resampled_by_label(pred)
    counts = MatchCounts()
    for name in sorted(set(gt_points) | set(pred_points)):
        g = gt_points.get(name)
        p = pred_points.get(name)
        matchable = name != "unlabeled"
        if p is not None:
            if matchable and g is not None:
                near = cKDTree(g).query(p)[0] <= delta
                tp_pts = p[near]
                c = counts.label(name)
                c.tp += int(np.count_nonzero(near))
                c.fp += int(np.count_nonzero(~near))
                if len(tp_pts):
                    dist = np.full(len(tp_pts), np.inf)
                    for line in gt_lines[name]:
                        dist = np.minimum(
                            dist, points_to_polyline_distances(tp_pts, line)
                        )
                    c.sum_distance += float(np.sum(dist))
                    c.n_distance += len(tp_pts)
            else:
                counts.label(name).fp += len(p)
        if g is not None:
            if matchable and p is not None:
                unmatched = cKDTree(p).query(g)[0] > delta
                counts.label(name).fn += int(np.count_nonzero(unmatched))
            else:
                counts.label(name).fn += len(g)
    return counts


def missed_ribs(pred: CenterlineSet, gt: CenterlineSet, delta: float = DEFAULT_DELTA_MM) -> int:
    """Ground-truth ribs with less than half their points matched by
    correctly-labeled prediction points."""
    pred_points, _ = _resampled_by_label(pred)
    trees = {
        name: cKDTree(pts) for name, pts in pred_points.items() if name != "unlabeled"
    }
    missed = 0
    for rib in gt.ribs:
        pts = resample_arclength(rib.points, _RESAMPLE_STEP_MM)
        tree = trees.get(rib.label)
        if tree is None:
            missed += 1
            continue
        covered = np.count_nonzero(tree.query(pts)[0] <= delta)
        if covered < 0.5 * len(pts):
            missed += 1
    return missed


@dataclass
class RibRow:
    label: str
    tp: int
    fp: int
    fn: int
    sensitivity: float | None
    precision: float | None
    mean_distance_mm: float | None
    dice: float | None


@dataclass
class EvalReport:
    rows: list
    aggregate: RibRow
    missed_histogram: dict
    cases: int
    delta_mm: float


def _row_from_counts(label: str, c: LabelCounts) -> RibRow:
    sens, prec, dice = counts_to_metrics(c.tp, c.fp, c.fn)
    mean_d = c.sum_distance / c.n_distance if c.n_distance > 0 else None
    return RibRow(label, c.tp, c.fp, c.fn, sens, prec, mean_d, dice)


def _label_sort_key(label: str):
    number, side = parse_label(label)
    if number is None:
        return (99, "z")
    return (number, side)


def build_report(cases, delta: float = DEFAULT_DELTA_MM) -> EvalReport:
    """Pool match counts over (pred, gt) case pairs and fill the report."""
    cases = list(cases)
    if not cases:
        raise ValueError("need at least one (pred, gt) case")
    pooled = MatchCounts()
    gt_labels = set()
    bins = {"0": 0, "1": 0, "2": 0, "3+": 0}
    for pred, gt in cases:
        pooled.merge(match_centerlines(pred, gt, delta))
        gt_labels.update(gt.labels())
        n_missed = missed_ribs(pred, gt, delta)
        bins[str(n_missed) if n_missed < 3 else "3+"] += 1
    rows = [
        _row_from_counts(name, pooled.per_label[name])
        for name in sorted(gt_labels, key=_label_sort_key)
        if name in pooled.per_label
    ]
    aggregate = _row_from_counts("all ribs", pooled.aggregate())
    histogram = {k: v / len(cases) for k, v in bins.items()}
    return EvalReport(
        rows=rows,
        aggregate=aggregate,
        missed_histogram=histogram,
        cases=len(cases),
        delta_mm=delta,
    )


# ---------------------------------------------------------------------------
# report rendering


def _row_dict(row: RibRow) -> dict:
    return {
        "label": row.label,
        "tp": row.tp,
        "fp": row.fp,
        "fn": row.fn,
        "sensitivity": row.sensitivity,
        "precision": row.precision,
        "mean_distance_mm": row.mean_distance_mm,
        "dice": row.dice,
    }


def report_to_json(report: EvalReport) -> str:
    payload = {
        "delta_mm": report.delta_mm,
        "cases": report.cases,
        "per_rib": [_row_dict(r) for r in report.rows],
        "aggregate": _row_dict(report.aggregate),
        "missed_rib_histogram": report.missed_histogram,
    }
    return json.dumps(payload, indent=2) + "\n"


def _fmt(value, width: int) -> str:
    if value is None:
        return "n/a".rjust(width)
    return f"{value:.3f}".rjust(width)


def report_to_text(report: EvalReport) -> str:
    lines = [f"{'rib':<10}{'sens.':>8}{'prec.':>8}{'dist.(mm)':>11}{'Dice':>8}"]
    lines.append("-" * len(lines[0]))
    for row in report.rows + [report.aggregate]:
        if row is report.aggregate and report.rows:
            lines.append("-" * len(lines[0]))
        lines.append(
            f"{row.label:<10}"
            f"{_fmt(row.sensitivity, 8)}"
            f"{_fmt(row.precision, 8)}"
            f"{_fmt(row.mean_distance_mm, 11)}"
            f"{_fmt(row.dice, 8)}"
        )
    lines.append("")
    lines.append(f"missed ribs per case ({report.cases} case(s)):")
    for key in ("0", "1", "2", "3+"):
        lines.append(f"  {key:>2}: {100.0 * report.missed_histogram[key]:.1f} %")
    return "\n".join(lines) + "\n"
