"""Rib centerline extraction from a combined probability field.

Pipeline: slice-wise rib cage bounding box, initial left/right rib detection
in sagittal search windows, iterative tracing with gap bridging through a
forward-looking cone, fan-based discovery of neighboring ribs, and anatomical
labeling anchored on the first/twelfth rib class responses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .centerline import (
    CenterlineSet,
    RibCenterline,
    make_label,
    point_at_arclength,
    polyline_length,
    resample_arclength,
)
from .probmap import combined_probability
from .volgrid import ProbabilityMap, VoxelGrid, sample_trilinear

_MARCH_SUBSTEP_MM = 1.0
_TANGENT_PROBE_MM = 2.0
# depth fraction (anterior -> posterior) of the initial search window anchor;
# rib responses concentrate in the posterior-lateral quadrant
_WINDOW_DEPTH_FRACTION = 0.75
_MAX_TRACE_ITERS = 4000
_MAX_NEIGHBOR_RIBS = 64
_MAX_SEED_RETRIES = 6
_EPS = 1e-9


class RibCageNotFound(RuntimeError):
    """No valid stack of rib-like axial slices in the volume."""


class RibsNotFound(RuntimeError):
    """Neither initial search window contained a suprathreshold response."""


@dataclass(frozen=True)
class TraceParams:
    """All numeric constants of the extraction pipeline.

    Every field can be overridden from a JSON config file; unknown keys in
    the file are rejected so typos cannot silently fall back to defaults.
    """

    prob_threshold: float = 0.5
    min_box_mm: tuple = (30.0, 10.0)
    anchor_fractions: tuple = (0.25, 0.75)
    search_window_mm: tuple = (100.0, 100.0)
    sphere_diameter_mm: float = 15.0
    max_step_mm: float = 7.5
    stall_threshold_mm: float = 3.0
    fan_anchor_offset_mm: float = 10.0
    fan_step_mm: float = 10.0
    label_score_threshold: float = 0.5
    cone_half_angle_deg: float = 30.0
    cone_length_mm: float = 20.0
    fan_radius_mm: float = 40.0
    fan_half_angle_deg: float = 60.0
    duplicate_distance_mm: float = 5.0
    min_rib_length_mm: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "min_box_mm", tuple(float(v) for v in self.min_box_mm))
        object.__setattr__(
            self, "anchor_fractions", tuple(float(v) for v in self.anchor_fractions)
        )
        object.__setattr__(
            self, "search_window_mm", tuple(float(v) for v in self.search_window_mm)
        )
        lengths = (
            self.sphere_diameter_mm,
            self.max_step_mm,
            self.stall_threshold_mm,
            self.fan_anchor_offset_mm,
            self.fan_step_mm,
            self.cone_length_mm,
            self.fan_radius_mm,
            self.duplicate_distance_mm,
            self.min_rib_length_mm,
            *self.min_box_mm,
            *self.search_window_mm,
        )
        if any(v <= 0 for v in lengths):
            raise ValueError("all length parameters must be > 0")
        for angle in (self.cone_half_angle_deg, self.fan_half_angle_deg):
            if not 0 < angle <= 90:
                raise ValueError("angles must lie in (0, 90] degrees")
        for thr in (self.prob_threshold, self.label_score_threshold):
            if not 0 < thr < 1:
                raise ValueError("thresholds must lie in (0, 1)")
        if len(self.anchor_fractions) != 2 or not all(
            0 < f < 1 for f in self.anchor_fractions
        ):
            raise ValueError("anchor_fractions must be two values in (0, 1)")

    @classmethod
    def from_dict(cls, overrides: dict) -> "TraceParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValueError(f"unknown trace parameter(s): {', '.join(unknown)}")
        return cls(**overrides)

    @classmethod
    def from_json_file(cls, path: str) -> "TraceParams":
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError("trace config must be a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class RibCageBox:
    """Rib cage search region: a z-range with four inclined faces.

    Each face is a linear border model ``border(z) = slope * z + intercept``
    fitted over the valid axial slices.
    """

    z_range: tuple
    left: tuple
    right: tuple
    anterior: tuple
    posterior: tuple

    def __post_init__(self):
        z_lo, z_hi = self.z_range
        if not z_lo < z_hi:
            raise ValueError("z_range must satisfy z_lo < z_hi")
        for z in self.z_range:
            if not self.left_at(z) < self.right_at(z):
                raise ValueError("left border must stay below right border")
            if not self.anterior_at(z) < self.posterior_at(z):
                raise ValueError("anterior border must stay below posterior border")

    def _eval(self, face, z: float) -> float:
        z = min(max(z, self.z_range[0]), self.z_range[1])
        return face[0] * z + face[1]

    def left_at(self, z: float) -> float:
        return self._eval(self.left, z)

    def right_at(self, z: float) -> float:
        return self._eval(self.right, z)

    def anterior_at(self, z: float) -> float:
        return self._eval(self.anterior, z)

    def posterior_at(self, z: float) -> float:
        return self._eval(self.posterior, z)

    def midline_x(self, z: float) -> float:
        return 0.5 * (self.left_at(z) + self.right_at(z))


@dataclass
class TraceState:
    """Current tracer position, direction and local covariance."""

    center: np.ndarray
    tangent: np.ndarray
    covariance: np.ndarray
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.tangent = np.asarray(self.tangent, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        norm = np.linalg.norm(self.tangent)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("tangent must be a unit vector")


# ---------------------------------------------------------------------------
# symmetric 3x3 eigen decomposition (cyclic Jacobi)


def _jacobi_eigh3(a: np.ndarray):
    a = a.copy()
    v = np.eye(3)
    scale = max(1.0, float(np.linalg.norm(a)))
    for _ in range(50):
        off = math.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= 1e-12 * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def principal_direction(sigma, prev_tangent=None) -> np.ndarray:
    """Unit eigenvector of the largest eigenvalue of a symmetric 3x3 matrix.

    On a (near-)degenerate top eigenvalue the candidate closest in direction
    to ``prev_tangent`` wins; the sign is chosen so the dot product with the
    previous tangent is non-negative.  Without a previous tangent, (1, 0, 0)
    is used for both rules.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (3, 3):
        raise ValueError("sigma must be 3x3")
    asym = np.max(np.abs(sigma - sigma.T))
    if asym > 1e-9 * max(1.0, float(np.max(np.abs(sigma)))):
        raise ValueError("sigma must be symmetric")
    sigma = 0.5 * (sigma + sigma.T)
    prev = np.asarray(
        prev_tangent if prev_tangent is not None else (1.0, 0.0, 0.0), dtype=np.float64
    )
    eigvals, eigvecs = _jacobi_eigh3(sigma)
    order = np.argsort(eigvals)[::-1]
    top = order[0]
    trace = float(np.trace(sigma))
    near = [
        j for j in range(3) if eigvals[top] - eigvals[j] < 1e-9 * abs(trace)
    ]
    if len(near) > 1:
        top = max(near, key=lambda j: (abs(float(eigvecs[:, j] @ prev)), -j))
    vec = eigvecs[:, top]
    vec = vec / np.linalg.norm(vec)
    d = float(vec @ prev)
    if d < 0:
        vec = -vec
    elif d == 0:
        nz = np.nonzero(vec)[0]
        if len(nz) and vec[nz[0]] < 0:
            vec = -vec
    return vec


# ---------------------------------------------------------------------------
# probability-weighted sphere moments

_sphere_offset_cache = {}


def _sphere_offsets(spacing: tuple, radius: float):
    key = (spacing, radius)
    cached = _sphere_offset_cache.get(key)
    if cached is not None:
        return cached
    sp = np.asarray(spacing)
    margin = radius + 0.5 * float(np.linalg.norm(sp))
    half = np.ceil(margin / sp).astype(int)
    axes = [np.arange(-h, h + 1) for h in half]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    offsets = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    keep = np.linalg.norm(offsets * sp, axis=1) <= margin
    offsets = offsets[keep]
    _sphere_offset_cache[key] = offsets
    return offsets


def _sphere_voxels(grid: VoxelGrid, point: np.ndarray, radius: float):
    """Indices, world positions and values of grid voxels within radius of point."""
    sp = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    base = np.round((point - origin) / sp).astype(int)
    idx = base + _sphere_offsets(grid.spacing, radius)
    ok = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    idx = idx[ok]
    pos = origin + idx * sp
    within = np.linalg.norm(pos - point, axis=1) <= radius
    idx, pos = idx[within], pos[within]
    vals = grid.values[idx[:, 0], idx[:, 1], idx[:, 2]]
    return idx, pos, vals


def weighted_mean(grid: VoxelGrid, point, radius: float):
    """Probability-weighted center of mass in a sphere; None on zero mass."""
    point = np.asarray(point, dtype=np.float64)
    _, pos, w = _sphere_voxels(grid, point, radius)
    total = float(np.sum(w))
    if total <= 0:
        return None
    return (w[:, None] * pos).sum(axis=0) / total


def weighted_covariance(grid: VoxelGrid, point, radius: float):
    """Probability-weighted covariance of voxel coordinates; None on zero mass."""
    point = np.asarray(point, dtype=np.float64)
    _, pos, w = _sphere_voxels(grid, point, radius)
    total = float(np.sum(w))
    if total <= 0:
        return None
    mean = (w[:, None] * pos).sum(axis=0) / total
    centered = pos - mean
    cov = (w[:, None, None] * centered[:, :, None] * centered[:, None, :]).sum(axis=0)
    return cov / total


def _sphere_moments(grid: VoxelGrid, point, radius: float):
    point = np.asarray(point, dtype=np.float64)
    _, pos, w = _sphere_voxels(grid, point, radius)
    total = float(np.sum(w))
    if total <= 0:
        return None, None
    mean = (w[:, None] * pos).sum(axis=0) / total
    centered = pos - mean
    cov = (w[:, None, None] * centered[:, :, None] * centered[:, None, :]).sum(axis=0)
    return mean, cov / total


# ---------------------------------------------------------------------------
# Step 1: rib cage bounding box


def detect_bounding_box(q: VoxelGrid, params: TraceParams) -> RibCageBox:
    """Fit the rib cage search region from the suprathreshold slice rectangles."""
    mask = q.values >= params.prob_threshold
    nx, ny, nz = q.dims
    sx, sy, sz = q.spacing
    ox, oy, oz = q.origin
    valid = []
    for k in range(nz):
        sl = mask[:, :, k]
        xs = np.nonzero(sl.any(axis=1))[0]
        if len(xs) == 0:
            continue
        ys = np.nonzero(sl.any(axis=0))[0]
        x_lo, x_hi = ox + xs[0] * sx, ox + xs[-1] * sx
        y_lo, y_hi = oy + ys[0] * sy, oy + ys[-1] * sy
        if x_hi - x_lo < params.min_box_mm[0] or y_hi - y_lo < params.min_box_mm[1]:
            continue
        valid.append((k, x_lo, x_hi, y_lo, y_hi))
    if not valid:
        raise RibCageNotFound("no valid rib-like axial slices")
    # longest run of consecutive valid slices; ties keep the lowest run
    runs = []
    prev = valid[0][0]
    run_rows = [valid[0]]
    for row in valid[1:]:
        if row[0] == prev + 1:
            run_rows.append(row)
        else:
            runs.append(run_rows)
            run_rows = [row]
        prev = row[0]
    runs.append(run_rows)
    best = max(runs, key=len)
    if len(best) < 3:
        raise RibCageNotFound("no rib cage found: fewer than 3 consecutive valid slices")
    zs = np.array([oz + row[0] * sz for row in best])
    borders = np.array([[row[1], row[2], row[3], row[4]] for row in best])
    faces = [tuple(np.polyfit(zs, borders[:, i], 1)) for i in range(4)]
    return RibCageBox(
        z_range=(float(zs[0]), float(zs[-1])),
        left=faces[0],
        right=faces[1],
        anterior=faces[2],
        posterior=faces[3],
    )


# ---------------------------------------------------------------------------
# Step 2: initial rib detection


def _window_scan(q, center_yz, x_plane, params, reject=None):
    """First suprathreshold point in a sagittal window, nearest to center first."""
    wy, wz = params.search_window_mm
    sy, sz = q.spacing[1], q.spacing[2]
    jn = int(math.floor(wy / 2 / sy))
    kn = int(math.floor(wz / 2 / sz))
    jj, kk = np.meshgrid(np.arange(-jn, jn + 1), np.arange(-kn, kn + 1), indexing="ij")
    jj, kk = jj.ravel(), kk.ravel()
    d2 = (jj * sy) ** 2 + (kk * sz) ** 2
    order = np.lexsort((kk, jj, d2))
    pts = np.column_stack(
        [
            np.full(len(jj), x_plane),
            center_yz[0] + jj * sy,
            center_yz[1] + kk * sz,
        ]
    )
    vals = sample_trilinear(q, pts)
    for i in order:
        if vals[i] < params.prob_threshold:
            continue
        p = pts[i]
        if reject is not None and reject(p):
            continue
        return p
    return None


def _seed_from_point(q: VoxelGrid, point, params: TraceParams):
    radius = params.sphere_diameter_mm / 2
    mean, cov = _sphere_moments(q, point, radius)
    if mean is None:
        return None
    tangent = principal_direction(cov)
    return TraceState(center=mean, tangent=tangent, covariance=cov)


def _detect_side(q, box, side: str, params, reject=None):
    z_mid = 0.5 * (box.z_range[0] + box.z_range[1])
    left, right = box.left_at(z_mid), box.right_at(z_mid)
    frac = params.anchor_fractions[0] if side == "left" else params.anchor_fractions[1]
    x_anchor = left + frac * (right - left)
    ant, post = box.anterior_at(z_mid), box.posterior_at(z_mid)
    y_anchor = ant + _WINDOW_DEPTH_FRACTION * (post - ant)
    hit = _window_scan(q, (y_anchor, z_mid), x_anchor, params, reject=reject)
    if hit is None:
        return None
    return _seed_from_point(q, hit, params)


def initial_rib_detection(q: VoxelGrid, box: RibCageBox, params: TraceParams):
    """Detect one rib per side; returns (left_state, right_state), None per
    absent side.  Raises RibsNotFound when both windows are empty."""
    left = _detect_side(q, box, "left", params)
    right = _detect_side(q, box, "right", params)
    if left is None and right is None:
        raise RibsNotFound("no ribs detected in either search window")
    return left, right


# ---------------------------------------------------------------------------
# Step 3: tracing

_cone_offset_cache = {}


def _cone_candidate_offsets(spacing: tuple, length: float):
    key = (spacing, length)
    cached = _cone_offset_cache.get(key)
    if cached is not None:
        return cached
    sp = np.asarray(spacing)
    margin = length + 0.5 * float(np.linalg.norm(sp))
    half = np.ceil(margin / sp).astype(int)
    axes = [np.arange(-h, h + 1) for h in half]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    offsets = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    keep = np.linalg.norm(offsets * sp, axis=1) <= margin
    offsets = offsets[keep]
    _cone_offset_cache[key] = offsets
    return offsets


def _cone_search(q: VoxelGrid, apex, axis, params: TraceParams, min_along: float = 0.0):
    """Nearest suprathreshold voxel inside the forward-looking cone, or None.

    Candidates closer than ``min_along`` when projected on the axis are
    skipped: the response up to the march's threshold crossing is already
    explored, so bridging must look beyond it.
    """
    apex = np.asarray(apex, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    sp = np.asarray(q.spacing)
    origin = np.asarray(q.origin)
    base = np.round((apex - origin) / sp).astype(int)
    idx = base + _cone_candidate_offsets(q.spacing, params.cone_length_mm)
    ok = np.all((idx >= 0) & (idx < np.asarray(q.dims)), axis=1)
    idx = idx[ok]
    pos = origin + idx * sp
    rel = pos - apex
    dist = np.linalg.norm(rel, axis=1)
    cos_half = math.cos(math.radians(params.cone_half_angle_deg))
    along = rel @ axis
    inside = (
        (dist > _EPS)
        & (dist <= params.cone_length_mm)
        & (along >= cos_half * dist)
        & (along > min_along)
    )
    idx, pos, dist = idx[inside], pos[inside], dist[inside]
    if len(idx) == 0:
        return None
    vals = q.values[idx[:, 0], idx[:, 1], idx[:, 2]]
    good = vals >= params.prob_threshold
    if not np.any(good):
        return None
    idx, pos, dist = idx[good], pos[good], dist[good]
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], dist))
    return pos[order[0]]


def _march(q: VoxelGrid, start, tangent, params: TraceParams):
    """Move along the tangent in fixed substeps until the field drops below
    threshold or the step budget is used.  Returns (stop, last_good)."""
    steps = list(np.arange(_MARCH_SUBSTEP_MM, params.max_step_mm + _EPS, _MARCH_SUBSTEP_MM))
    if not steps or steps[-1] < params.max_step_mm - _EPS:
        steps.append(params.max_step_mm)
    last_good = np.asarray(start, dtype=np.float64)
    for dist in steps:
        p = start + dist * tangent
        if sample_trilinear(q, p) < params.prob_threshold:
            return p, last_good
        last_good = p
    return last_good, last_good


def _trace_direction(q, c0, t0, params: TraceParams, region=None):
    """Control points traced from c0 along t0 (excluding c0 itself).

    ``region`` is an optional point predicate; the direction terminates when
    the next center would leave it (used to keep left/right passes apart).
    """
    radius = params.sphere_diameter_mm / 2
    points = []
    pos = np.asarray(c0, dtype=np.float64)
    prev_center = pos
    tangent = np.asarray(t0, dtype=np.float64)
    last_bridge_stall = None

    def append(p):
        tail = points[-1] if points else np.asarray(c0)
        if np.linalg.norm(p - tail) > _EPS:
            points.append(np.asarray(p, dtype=np.float64))

    for _ in range(_MAX_TRACE_ITERS):
        stop, last_good = _march(q, pos, tangent, params)
        center = weighted_mean(q, stop, radius)
        zero_mass = center is None
        if zero_mass:
            center = prev_center
        if region is not None and not region(center):
            return points
        move = float(np.linalg.norm(center - prev_center))
        if not zero_mass:
            append(center)
        if move < params.stall_threshold_mm:
            cov = weighted_covariance(q, center, radius)
            axis = (
                principal_direction(cov, prev_tangent=tangent)
                if cov is not None
                else tangent
            )
            no_progress = (
                last_bridge_stall is not None
                and float(np.linalg.norm(center - last_bridge_stall))
                < params.stall_threshold_mm
            )
            min_along = max(params.stall_threshold_mm, float((stop - center) @ axis))
            continuation = (
                None
                if no_progress
                else _cone_search(q, center, axis, params, min_along=min_along)
            )
            if continuation is not None and region is not None and not region(continuation):
                continuation = None
            if continuation is None:
                # keep the furthest suprathreshold march position so the
                # trace reaches the end of the response, not only the last
                # (pulled-back) sphere mean; only when it extends forward
                tail = points[-1] if points else np.asarray(c0)
                if float((last_good - tail) @ tangent) > _EPS:
                    append(last_good)
                return points
            last_bridge_stall = center
            prev_center = center
            pos = continuation
            tangent = axis
            continue
        last_bridge_stall = None
        cov = weighted_covariance(q, center, radius)
        motion = (center - prev_center) / move
        tangent = principal_direction(cov, prev_tangent=motion) if cov is not None else motion
        prev_center = center
        pos = center
    return points


def trace_rib(q: VoxelGrid, seed: TraceState, params: TraceParams, region=None):
    """Trace one rib in both directions from the seed.

    Returns an unlabeled RibCenterline, or None when fewer than two distinct
    control points were produced (callers discard those).
    """
    forward = _trace_direction(q, seed.center, seed.tangent, params, region=region)
    backward = _trace_direction(q, seed.center, -seed.tangent, params, region=region)
    pts = backward[::-1] + [np.asarray(seed.center, dtype=np.float64)] + forward
    dedup = [pts[0]]
    for p in pts[1:]:
        if np.linalg.norm(p - dedup[-1]) > _EPS:
            dedup.append(p)
    if len(dedup) < 2:
        return None
    return RibCenterline(points=np.vstack(dedup))


# ---------------------------------------------------------------------------
# Step 3 continued: fan search for neighboring ribs


def _plane_intersections(line, anchor, normal):
    """Points where a polyline crosses the plane through anchor with normal."""
    pts = np.asarray(line, dtype=np.float64)
    f = (pts - anchor) @ normal
    hits = []
    for i in range(len(pts) - 1):
        f0, f1 = f[i], f[i + 1]
        if f0 == 0.0:
            hits.append(pts[i])
        elif (f0 < 0 < f1) or (f1 < 0 < f0):
            w = f0 / (f0 - f1)
            hits.append(pts[i] + w * (pts[i + 1] - pts[i]))
    if f[-1] == 0.0:
        hits.append(pts[-1])
    return hits


def _project_unit(vec, normal):
    v = vec - (vec @ normal) * normal
    n = np.linalg.norm(v)
    return v / n if n > _EPS else None


def _existing_tree(existing):
    pts = []
    for line in existing:
        arr = np.asarray(line, dtype=np.float64)
        if len(arr) >= 2:
            pts.append(resample_arclength(arr, 1.0))
        else:
            pts.append(arr)
    if not pts:
        return None
    return cKDTree(np.vstack(pts))


def find_neighbor_rib(
    q: VoxelGrid,
    reference: RibCenterline,
    neighbor_hint,
    direction: str,
    params: TraceParams,
    existing=(),
    candidate_filter=None,
):
    """Search the fan regions along the reference rib for an untraced rib.

    ``reference`` must be ordered spine-to-distal.  The fan plane is normal to
    the rib tangent at the anchor; it opens away from the neighbor hint's
    intersection with the plane (continuing the vertical rib progression), or
    straight up/down when no hint exists.  Returns a TraceState or None.
    """
    if direction not in ("up", "down"):
        raise ValueError("direction must be 'up' or 'down'")
    ref_pts = reference.points
    total = polyline_length(ref_pts)
    tree = _existing_tree(list(existing) or [ref_pts])
    up = np.array([0.0, 0.0, 1.0 if direction == "up" else -1.0])
    hint_pts = neighbor_hint.points if neighbor_hint is not None else None

    radii = np.arange(2.0, params.fan_radius_mm + _EPS, 2.0)
    angle_steps = [0.0]
    for a in np.arange(5.0, params.fan_half_angle_deg + _EPS, 5.0):
        angle_steps.extend([a, -a])

    s = params.fan_anchor_offset_mm
    while s <= total + _EPS:
        anchor = point_at_arclength(ref_pts, min(s, total))
        h = _TANGENT_PROBE_MM
        t = point_at_arclength(ref_pts, min(s + h, total)) - point_at_arclength(
            ref_pts, max(s - h, 0.0)
        )
        norm = np.linalg.norm(t)
        if norm < _EPS:
            s += params.fan_step_mm
            continue
        normal = t / norm
        opening = None
        if hint_pts is not None:
            hits = _plane_intersections(hint_pts, anchor, normal)
            if hits:
                nearest = min(hits, key=lambda p: np.linalg.norm(p - anchor))
                opening = _project_unit(anchor - nearest, normal)
        if opening is None:
            opening = _project_unit(up, normal)
        if opening is None:  # tangent happens to be vertical
            opening = _project_unit(np.array([1.0, 0.0, 0.0]), normal)
        side_axis = np.cross(normal, opening)
        side_axis /= np.linalg.norm(side_axis)
        # polar lattice, radius-major with angles fanning out from the center
        pts = np.array(
            [
                anchor
                + r
                * (
                    math.cos(math.radians(ang)) * opening
                    + math.sin(math.radians(ang)) * side_axis
                )
                for r in radii
                for ang in angle_steps
            ]
        )
        vals = sample_trilinear(q, pts)
        for i in np.nonzero(vals >= params.prob_threshold)[0]:
            p = pts[i]
            if tree is not None and tree.query(p)[0] <= params.duplicate_distance_mm:
                continue
            if candidate_filter is not None and not candidate_filter(p):
                continue
            seed = _seed_from_point(q, p, params)
            if seed is not None:
                return seed
        s += params.fan_step_mm
    return None


# ---------------------------------------------------------------------------
# Steps 1-4 composition


def _spine_distance(box: RibCageBox, point) -> float:
    z = point[2]
    return math.hypot(point[0] - box.midline_x(z), point[1] - box.posterior_at(z))


def _orient_spine_first(points: np.ndarray, box: RibCageBox) -> np.ndarray:
    if _spine_distance(box, points[-1]) < _spine_distance(box, points[0]):
        return points[::-1].copy()
    return points


def _duplicate_fraction(points, existing_tree, distance: float) -> float:
    if existing_tree is None:
        return 0.0
    samples = resample_arclength(points, 1.0)
    dist, _ = existing_tree.query(samples)
    return float(np.mean(dist <= distance))


def extract_all(prob: ProbabilityMap, params: TraceParams = None, provenance: str = "") -> CenterlineSet:
    """Run the full extraction: bounding box, initial ribs, neighbor discovery
    and labeling.  Left and right halves of the cage are processed as two
    independent passes split at the bounding-box midline."""
    if params is None:
        params = TraceParams()
    q = combined_probability(prob)
    box = detect_bounding_box(q, params)

    accepted = []  # (points, side) in discovery order
    rejected = []  # too-short / duplicate traces; excluded from re-discovery
    sides_found = 0

    def exclusion_lines():
        return [pts for pts, _ in accepted] + rejected

    def vet_trace(rib, seed_center):
        """Orient and filter a raw trace; returns points or None (recording
        the rejection so discovery does not loop on the same response)."""
        if rib is None:
            rejected.append(np.vstack([seed_center, seed_center + [0.1, 0.0, 0.0]]))
            return None
        pts = _orient_spine_first(rib.points, box)
        tree = _existing_tree(exclusion_lines())
        if (
            polyline_length(pts) < params.min_rib_length_mm
            or _duplicate_fraction(pts, tree, params.duplicate_distance_mm) > 0.5
        ):
            rejected.append(pts)
            return None
        return pts

    for side in ("left", "right"):

        def side_ok(p, _side=side):
            if _side == "left":
                return p[0] <= box.midline_x(p[2])
            return p[0] >= box.midline_x(p[2])

        # initial rib, retrying past spurious responses
        initial = None
        for _ in range(_MAX_SEED_RETRIES):
            tree = _existing_tree(exclusion_lines()) if accepted or rejected else None

            def reject(p):
                if not side_ok(p):
                    return True
                return tree is not None and tree.query(p)[0] <= params.duplicate_distance_mm

            seed = _detect_side(q, box, side, params, reject=reject)
            if seed is None:
                break
            initial = vet_trace(trace_rib(q, seed, params, region=side_ok), seed.center)
            if initial is not None:
                break
        if initial is None:
            continue
        sides_found += 1
        accepted.append((initial, side))

        for direction in ("up", "down"):
            ref = initial
            hint = None
            for _ in range(_MAX_NEIGHBOR_RIBS):
                hint_line = RibCenterline(points=hint) if hint is not None else None
                state = find_neighbor_rib(
                    q,
                    RibCenterline(points=ref),
                    hint_line,
                    direction,
                    params,
                    existing=exclusion_lines(),
                    candidate_filter=side_ok,
                )
                if state is None:
                    break
                pts = vet_trace(trace_rib(q, state, params, region=side_ok), state.center)
                if pts is None:
                    continue
                accepted.append((pts, side))
                hint = ref
                ref = pts

    if sides_found == 0:
        raise RibsNotFound("no ribs detected in either search window")

    ordered = sorted(accepted, key=lambda item: (item[0][0][2], item[1], item[0][0][0]))
    ribs = [
        RibCenterline(points=pts, label="unlabeled", side=side) for pts, side in ordered
    ]
    return label_ribs(CenterlineSet(ribs=ribs, provenance=provenance), prob, params)


# ---------------------------------------------------------------------------
# Step 4: labeling


def _score_classes(rib: RibCenterline, prob: ProbabilityMap) -> dict:
    samples = resample_arclength(rib.points, 1.0)
    means = {}
    for name, channel in (("first", 1), ("twelfth", 2), ("intermediate", 3)):
        grid = prob.channel(channel)
        means[name] = float(np.mean(sample_trilinear(grid, samples)))
    return means


def label_ribs(lines: CenterlineSet, prob: ProbabilityMap, params: TraceParams = None) -> CenterlineSet:
    """Assign rib numbers per side by counting from an identified first or
    twelfth rib (or positionally for a complete 12-rib side)."""
    if params is None:
        params = TraceParams()
    scored = [
        RibCenterline(
            points=rib.points,
            label="unlabeled",
            side=rib.side,
            class_scores=_score_classes(rib, prob),
        )
        for rib in lines.ribs
    ]
    thr = params.label_score_threshold
    for side in ("left", "right"):
        members = [r for r in scored if r.side == side]  # feet-to-head order
        if not members:
            continue
        m = len(members)
        bottom, top = members[0], members[-1]
        if top.class_scores["first"] > thr:
            numbers = [m - i for i in range(m)]
        elif bottom.class_scores["twelfth"] > thr:
            numbers = [12 - i for i in range(m)]
        elif m == 12:
            numbers = [12 - i for i in range(m)]
        else:
            numbers = [None] * m
        for rib, number in zip(members, numbers):
            if number is not None and 1 <= number <= 12:
                rib.label = make_label(number, side)
    return CenterlineSet(ribs=scored, provenance=lines.provenance)
