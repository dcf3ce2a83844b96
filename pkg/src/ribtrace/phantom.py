"""Synthetic rib cage phantoms: paired ground-truth centerlines and 4-class
probability maps with controllable degradations.

Rib centerlines are half-elliptical arcs in near-axial planes, drooping from
the spine (posterior, high) to the sternum (anterior, low), stacked with a
fixed spacing and narrowing toward the head.  The droop makes consecutive
ribs overlap vertically, as in real anatomy, so every axial slice through the
cage carries response.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .centerline import (
    CenterlineSet,
    RibCenterline,
    make_label,
    points_to_polyline_distances,
    resample_arclength,
)
from .volgrid import N_CLASSES, ProbabilityMap

# arc parameter range: ribs stop short of the midline at the spine and leave
# a wider gap at the sternum
_PHI_SPINE = 0.15
_PHI_STERNUM = math.pi - 0.35
_GT_STEP_MM = 1.0
_DENSE_STEP_MM = 0.5
_TOP_MARGIN_MM = 20.0
_GRID_MARGIN_MM = 3.0

_DEGRADATION_FIELDS = {
    "dropout": {"rib", "arc_start_mm", "arc_len_mm"},
    "blob": {"center", "radius", "value"},
    "noise": {"sigma"},
    "fov_crop": {"z_lo", "z_hi"},
    "scoliosis": {"amplitude_mm"},
}


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and degradation recipe of a synthetic rib cage."""

    pairs: int = 12
    cage_width: float = 260.0
    cage_depth: float = 170.0
    cage_height: float = 280.0
    narrowing: float = 0.35
    rib_radius: float = 4.5
    rib_spacing: float = 20.0
    rib_droop: float = 25.0
    seed: int = 0
    degradations: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 1 <= self.pairs <= 12:
            raise ValueError("pairs must lie in [1, 12]")
        for name in ("cage_width", "cage_depth", "cage_height", "rib_radius", "rib_spacing"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.rib_droop < 0:
            raise ValueError("rib_droop must be >= 0")
        if not 0 <= self.narrowing < 1:
            raise ValueError("narrowing must lie in [0, 1)")
        needed = (
            _TOP_MARGIN_MM
            + (self.pairs - 1) * self.rib_spacing
            + self.rib_droop
            + self.rib_radius
            + 5.0
        )
        if self.cage_height < needed:
            raise ValueError(
                f"cage_height {self.cage_height} too small for {self.pairs} pairs "
                f"(needs >= {needed:.1f} mm)"
            )
        object.__setattr__(self, "degradations", tuple(dict(d) for d in self.degradations))
        for deg in self.degradations:
            kind = deg.get("type")
            if kind not in _DEGRADATION_FIELDS:
                raise ValueError(f"unknown degradation type {kind!r}")
            extra = set(deg) - _DEGRADATION_FIELDS[kind] - {"type"}
            missing = _DEGRADATION_FIELDS[kind] - set(deg)
            if extra or missing:
                raise ValueError(
                    f"degradation {kind!r}: missing {sorted(missing)}, unknown {sorted(extra)}"
                )
            if kind == "noise" and deg["sigma"] < 0:
                raise ValueError("noise sigma must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown phantom spec field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path: str) -> "PhantomSpec":
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError("phantom spec must be a JSON object")
        return cls.from_dict(data)


def _rib_class(pair_number: int) -> int:
    if pair_number == 1:
        return 1
    if pair_number == 12:
        return 2
    return 3


def _rib_curves(spec: PhantomSpec, scoliosis_amplitude: float):
    """Analytic centerline polylines for every rib, densely sampled.

    Returns a list of dicts with pair number, side, label, class and points
    (spine end first), ordered feet-to-head then left before right.
    """
    z_top = spec.cage_height - _TOP_MARGIN_MM
    b = spec.cage_depth / 2
    phi = np.linspace(_PHI_SPINE, _PHI_STERNUM, 2048)
    droop_frac = (phi - _PHI_SPINE) / (_PHI_STERNUM - _PHI_SPINE)
    ribs = []
    for n in range(spec.pairs, 0, -1):  # feet-to-head
        z_n = z_top - (n - 1) * spec.rib_spacing
        a_n = (spec.cage_width / 2) * (1 - spec.narrowing * z_n / spec.cage_height)
        dx = scoliosis_amplitude * math.sin(2 * math.pi * z_n / spec.cage_height)
        zs = z_n - spec.rib_droop * droop_frac
        ys = b * np.cos(phi)
        for side, sign in (("left", -1.0), ("right", 1.0)):
            xs = dx + sign * a_n * np.sin(phi)
            dense = np.column_stack([xs, ys, zs])
            ribs.append(
                {
                    "pair": n,
                    "side": side,
                    "label": make_label(n, side),
                    "cls": _rib_class(n),
                    "points": resample_arclength(dense, _GT_STEP_MM),
                    "dense": resample_arclength(dense, _DENSE_STEP_MM),
                }
            )
    return ribs


def _taper_profile(dist: np.ndarray, radius: float, taper: float) -> np.ndarray:
    return np.clip((radius + taper - dist) / taper, 0.0, 1.0)


def _paint_tube(channel, dims, spacing, origin, samples, radius, taper):
    lo = np.maximum(
        np.floor((samples.min(axis=0) - radius - taper - origin) / spacing), 0
    ).astype(int)
    hi = np.minimum(
        np.ceil((samples.max(axis=0) + radius + taper - origin) / spacing),
        np.asarray(dims) - 1,
    ).astype(int)
    if np.any(lo > hi):
        return
    axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]) * spacing + origin
    dist, _ = cKDTree(samples).query(pts)
    vals = _taper_profile(dist, radius, taper).reshape(
        hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1
    )
    region = (
        slice(lo[0], hi[0] + 1),
        slice(lo[1], hi[1] + 1),
        slice(lo[2], hi[2] + 1),
    )
    np.maximum(channel[region], vals, out=channel[region])


def _zero_tube(channel, dims, spacing, origin, dropped, kept_parts, radius):
    """Zero the response belonging to the dropped arc stretch.

    A voxel is cleared when it lies within the tube radius of the dropped
    sub-polyline *and* is nearer to it than to any kept part of the rib, so
    the response gap along the rib equals the dropped arc length.  Distances
    use the dense samples (nearest-sample), accurate to half a sample step.
    """
    lo = np.maximum(
        np.floor((dropped.min(axis=0) - radius - origin) / spacing), 0
    ).astype(int)
    hi = np.minimum(
        np.ceil((dropped.max(axis=0) + radius - origin) / spacing),
        np.asarray(dims) - 1,
    ).astype(int)
    if np.any(lo > hi):
        return
    axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    idx = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    pts = idx * spacing + origin
    dist_dropped, _ = cKDTree(dropped).query(pts)
    hit = dist_dropped <= radius
    if not np.any(hit):
        return
    idx, pts, dist_dropped = idx[hit], pts[hit], dist_dropped[hit]
    kept_pts = [part for part in kept_parts if len(part)]
    if kept_pts:
        dist_kept, _ = cKDTree(np.vstack(kept_pts)).query(pts)
        owned = dist_dropped < dist_kept
    else:
        owned = np.ones(len(pts), dtype=bool)
    sel = idx[owned]
    channel[sel[:, 0], sel[:, 1], sel[:, 2]] = 0.0


def _split_arc(points: np.ndarray, start: float, length: float):
    """(dropped sub-polyline, kept parts) of a polyline by arc-length interval."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    inside = (cum >= start) & (cum <= start + length)
    sub = points[inside]
    if len(sub) < 2:
        raise ValueError("dropout interval too short or outside the rib")
    kept = [points[cum <= start], points[cum >= start + length]]
    return sub, kept


def _index_runs(mask: np.ndarray):
    """[lo, hi) index ranges of the contiguous True runs in a boolean mask."""
    idx = np.nonzero(mask)[0]
    if len(idx) == 0:
        return []
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [len(idx) - 1]])
    return [(int(idx[s]), int(idx[e]) + 1) for s, e in zip(starts, ends)]


def generate(spec: PhantomSpec, spacing: float):
    """Build the phantom; returns (ProbabilityMap, CenterlineSet).

    Ground-truth centerlines reflect the geometry (including scoliosis and
    field-of-view cropping) but not the map degradations: dropouts, blobs and
    noise only alter the probability channels, emulating detection failures.
    """
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    scoliosis = 0.0
    for deg in spec.degradations:
        if deg["type"] == "scoliosis":
            scoliosis = float(deg["amplitude_mm"])
    ribs = _rib_curves(spec, scoliosis)

    all_pts = np.vstack([r["dense"] for r in ribs])
    margin = spec.rib_radius + spacing + _GRID_MARGIN_MM
    lo = all_pts.min(axis=0) - margin
    hi = all_pts.max(axis=0) + margin
    lo[2] = min(lo[2], 0.0)
    hi[2] = max(hi[2], spec.cage_height)
    dims = tuple(int(np.floor((hi[a] - lo[a]) / spacing)) + 1 for a in range(3))
    origin = tuple(float(v) for v in lo)
    sp = np.full(3, float(spacing))

    channels = np.zeros((N_CLASSES,) + dims)
    taper = float(spacing)
    for rib in ribs:
        _paint_tube(
            channels[rib["cls"]], dims, sp, np.asarray(origin), rib["dense"],
            spec.rib_radius, taper,
        )
    channels[0] = 1.0 - np.minimum(channels[1] + channels[2] + channels[3], 1.0)

    rng = np.random.default_rng(spec.seed)
    gt = {r["label"]: r for r in ribs}
    crop = None
    for deg in spec.degradations:
        kind = deg["type"]
        if kind == "scoliosis":
            continue
        if kind == "dropout":
            rib = gt.get(deg["rib"])
            if rib is None:
                raise ValueError(f"dropout names unknown rib {deg['rib']!r}")
            sub, kept = _split_arc(
                rib["dense"], float(deg["arc_start_mm"]), float(deg["arc_len_mm"])
            )
            _zero_tube(
                channels[rib["cls"]], dims, sp, np.asarray(origin), sub, kept,
                spec.rib_radius + taper,
            )
        elif kind == "blob":
            center = np.asarray(deg["center"], dtype=np.float64)
            radius = float(deg["radius"])
            axes = [
                np.arange(
                    max(0, int(np.floor((center[a] - radius - taper - origin[a]) / spacing))),
                    min(dims[a] - 1, int(np.ceil((center[a] + radius + taper - origin[a]) / spacing))) + 1,
                )
                for a in range(3)
            ]
            if all(len(ax) for ax in axes):
                gx, gy, gz = np.meshgrid(*axes, indexing="ij")
                pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]) * sp + origin
                dist = np.linalg.norm(pts - center, axis=1)
                add = float(deg["value"]) * _taper_profile(dist, radius, taper)
                region = (
                    slice(axes[0][0], axes[0][-1] + 1),
                    slice(axes[1][0], axes[1][-1] + 1),
                    slice(axes[2][0], axes[2][-1] + 1),
                )
                shape = tuple(len(ax) for ax in axes)
                channels[3][region] = np.clip(
                    channels[3][region] + add.reshape(shape), 0.0, 1.0
                )
        elif kind == "noise":
            sigma = float(deg["sigma"])
            if sigma > 0:
                channels = np.clip(
                    channels + rng.normal(0.0, sigma, channels.shape), 0.0, 1.0
                )
        elif kind == "fov_crop":
            z_lo, z_hi = float(deg["z_lo"]), float(deg["z_hi"])
            if z_hi <= z_lo:
                raise ValueError("fov_crop needs z_lo < z_hi")
            # clear the response owned by out-of-range arc stretches first, so
            # shallow tubes crossing the cut plane do not leave slivers
            for rib in ribs:
                dense = rib["dense"]
                inside = (dense[:, 2] >= z_lo) & (dense[:, 2] <= z_hi)
                if inside.all():
                    continue
                kept = [dense[inside]] if inside.any() else []
                for run_lo, run_hi in _index_runs(~inside):
                    dropped = dense[run_lo:run_hi]
                    if len(dropped) >= 2:
                        _zero_tube(
                            channels[rib["cls"]], dims, sp, np.asarray(origin),
                            dropped, kept, spec.rib_radius + taper,
                        )
            zs = origin[2] + np.arange(dims[2]) * spacing
            keep = np.nonzero((zs >= z_lo) & (zs <= z_hi))[0]
            if len(keep) == 0:
                raise ValueError("fov_crop leaves no volume")
            channels = channels[:, :, :, keep[0] : keep[-1] + 1]
            origin = (origin[0], origin[1], float(zs[keep[0]]))
            dims = channels.shape[1:]
            crop = (z_lo, z_hi) if crop is None else (max(crop[0], z_lo), min(crop[1], z_hi))

    gt_ribs = []
    for rib in ribs:
        pts = rib["points"]
        if crop is not None:
            inside = (pts[:, 2] >= crop[0]) & (pts[:, 2] <= crop[1])
            pts = pts[inside]
            if len(pts) < 2:
                continue
        gt_ribs.append(RibCenterline(points=pts, label=rib["label"], side=rib["side"]))
    if not gt_ribs:
        raise ValueError("field-of-view crop removed every rib")

    channels = np.clip(channels, 0.0, 1.0)
    pmap = ProbabilityMap(dims=dims, spacing=tuple(sp), origin=origin, channels=channels)
    lines = CenterlineSet(
        ribs=gt_ribs, provenance=f"phantom:pairs={spec.pairs}:seed={spec.seed}"
    )
    return pmap, lines
