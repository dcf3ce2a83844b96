"""Centerline geometry: splines, arc-length resampling, tube masks, distances.

A rib centerline is an ordered polyline in world mm.  Anatomical labels are
strings "01l".."12r" (rib number 1..12, side letter) or "unlabeled".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .probmap import LabelGrid
from .volgrid import VoxelGrid

SIDES = ("left", "right")

CLASS_FIRST = 1
CLASS_TWELFTH = 2
CLASS_INTERMEDIATE = 3


def make_label(number: int, side: str) -> str:
    if not 1 <= number <= 12:
        raise ValueError(f"rib number {number} outside 1..12")
    if side not in SIDES:
        raise ValueError(f"side must be left or right, got {side!r}")
    return f"{number:02d}{side[0]}"


def parse_label(label: str):
    """Split "05r" into (5, "right"); returns (None, "unknown") for unlabeled."""
    if label == "unlabeled":
        return None, "unknown"
    if len(label) == 3 and label[:2].isdigit() and label[2] in "lr":
        number = int(label[:2])
        if 1 <= number <= 12:
            return number, "left" if label[2] == "l" else "right"
    raise ValueError(f"bad rib label {label!r}")


def label_class(label: str) -> int:
    """Probability-map class of a rib label (unlabeled counts as intermediate)."""
    number, _ = parse_label(label)
    if number == 1:
        return CLASS_FIRST
    if number == 12:
        return CLASS_TWELFTH
    return CLASS_INTERMEDIATE


@dataclass
class RibCenterline:
    """Ordered 3D point sequence with an anatomical label."""

    points: np.ndarray
    label: str = "unlabeled"
    side: str = "unknown"
    class_scores: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ValueError("centerline needs at least 2 points of shape (N, 3)")
        if np.any(np.all(np.diff(pts, axis=0) == 0, axis=1)):
            raise ValueError("consecutive centerline points must be distinct")
        self.points = pts
        parse_label(self.label)  # validates the label format
        if self.side not in SIDES + ("unknown",):
            raise ValueError(f"bad side {self.side!r}")

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass
class CenterlineSet:
    """Rib centerlines of one volume, ordered feet-to-head."""

    ribs: list
    provenance: str = ""

    def labels(self) -> list:
        return [r.label for r in self.ribs]


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def spline_interpolate(control_points, samples_per_segment: int):
    """Natural cubic spline through the control points, chordally parameterized.

    Returns ``(n_ctrl - 1) * samples_per_segment + 1`` points; the first and
    last equal the input endpoints exactly.
    """
    pts = np.asarray(control_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise ValueError("need at least 2 control points")
    if samples_per_segment < 1:
        raise ValueError("samples_per_segment must be >= 1")
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(chords == 0):
        raise ValueError("control points must be pairwise distinct along the sequence")
    t = np.concatenate([[0.0], np.cumsum(chords)])
    if len(pts) == 2:
        spline = None
    else:
        spline = CubicSpline(t, pts, axis=0, bc_type="natural")
    out = []
    for seg in range(len(pts) - 1):
        ts = np.linspace(t[seg], t[seg + 1], samples_per_segment + 1)
        if seg > 0:
            ts = ts[1:]
        if spline is None:
            w = (ts - t[seg]) / (t[seg + 1] - t[seg])
            out.append(pts[seg] * (1 - w)[:, None] + pts[seg + 1] * w[:, None])
        else:
            out.append(spline(ts))
    samples = np.vstack(out)
    samples[0] = pts[0]
    samples[-1] = pts[-1]
    return samples


def resample_arclength(line, step: float):
    """Points at arc lengths 0, step, 2*step, ... along the polyline.

    The polyline endpoint is appended when it lies more than step/2 beyond the
    last regular sample (and always when only one sample would remain).
    """
    pts = np.asarray(line, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise ValueError("need a polyline of at least 2 points")
    if step <= 0:
        raise ValueError("step must be > 0")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(np.sum(seg))
    if total == 0:
        raise ValueError("polyline has zero length")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n_regular = int(np.floor(total / step + 1e-12)) + 1
    targets = np.arange(n_regular) * step
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    frac = (targets - cum[idx]) / seg[idx]
    samples = pts[idx] + (pts[idx + 1] - pts[idx]) * frac[:, None]
    residual = total - targets[-1]
    if residual > step / 2 or len(samples) < 2:
        samples = np.vstack([samples, pts[-1]])
    return samples


def point_at_arclength(line, s: float) -> np.ndarray:
    """Point at arc length ``s`` along the polyline (clamped to its ends)."""
    pts = np.asarray(line, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = min(max(s, 0.0), cum[-1])
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
    if seg[i] == 0:
        return pts[i].copy()
    w = (s - cum[i]) / seg[i]
    return pts[i] + (pts[i + 1] - pts[i]) * w


def points_to_polyline_distances(points, line) -> np.ndarray:
    """Min distance from each query point to the polyline (segment interiors count)."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    line = np.asarray(line, dtype=np.float64)
    a = line[:-1]
    d = line[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd[dd == 0] = 1.0
    # t[i, j]: projection parameter of point i onto segment j, clamped
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("ijk,jk->ij", ap, d) / dd[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(p[:, None, :] - closest, axis=2)
    return dist.min(axis=1)


def point_to_polyline_distance(point, line) -> float:
    line = np.asarray(line, dtype=np.float64)
    if line.ndim != 2 or len(line) < 2:
        raise ValueError("polyline needs at least 2 points")
    return float(points_to_polyline_distances(np.asarray(point, dtype=np.float64), line)[0])


def dilate_to_mask(lines: CenterlineSet, geometry: VoxelGrid, radius: float) -> LabelGrid:
    """Tube mask: each voxel takes the class of the nearest centerline within radius.

    Overlaps resolve to the nearer line, then to the smaller class index.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    dims = geometry.dims
    spacing = np.asarray(geometry.spacing)
    origin = np.asarray(geometry.origin)
    best_dist = np.full(dims, np.inf)
    best_class = np.zeros(dims, dtype=np.uint8)
    for rib in lines.ribs:
        cls = label_class(rib.label)
        pts = rib.points
        lo = np.maximum(np.floor((pts.min(axis=0) - radius - origin) / spacing), 0).astype(int)
        hi = np.minimum(
            np.ceil((pts.max(axis=0) + radius - origin) / spacing), np.asarray(dims) - 1
        ).astype(int)
        if np.any(lo > hi):
            continue
        axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        idx = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
        centers = origin + idx * spacing
        dist = points_to_polyline_distances(centers, pts)
        within = dist <= radius
        if not np.any(within):
            continue
        ii = idx[within]
        dd = dist[within]
        flat = (ii[:, 0], ii[:, 1], ii[:, 2])
        cur_d = best_dist[flat]
        cur_c = best_class[flat]
        take = (dd < cur_d) | ((dd == cur_d) & (cls < cur_c))
        if np.any(take):
            sel = tuple(f[take] for f in flat)
            best_dist[sel] = dd[take]
            best_class[sel] = cls
    return LabelGrid(geometry.dims, geometry.spacing, geometry.origin, best_class)


# ---------------------------------------------------------------------------
# JSON serialization shared by ground truth and predictions.


def centerline_set_to_json(lines: CenterlineSet) -> str:
    payload = {
        "volume": lines.provenance,
        "ribs": [
            {
                "label": rib.label,
                "points": [[float(c) for c in p] for p in rib.points],
            }
            for rib in lines.ribs
        ],
    }
    return json.dumps(payload, indent=2) + "\n"


def centerline_set_from_json(text: str) -> CenterlineSet:
    payload = json.loads(text)
    if not isinstance(payload, dict) or "ribs" not in payload:
        raise ValueError("centerline JSON must be an object with a 'ribs' list")
    ribs = []
    for entry in payload["ribs"]:
        label = entry.get("label", "unlabeled")
        _, side = parse_label(label)
        ribs.append(RibCenterline(points=np.asarray(entry["points"]), label=label, side=side))
    return CenterlineSet(ribs=ribs, provenance=payload.get("volume", ""))


def save_centerlines(path: str, lines: CenterlineSet) -> None:
    with open(path, "w") as f:
        f.write(centerline_set_to_json(lines))


def load_centerlines(path: str) -> CenterlineSet:
    with open(path) as f:
        return centerline_set_from_json(f.read())
