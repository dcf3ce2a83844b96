"""Axis-aligned 3D volumes with world/voxel mapping, trilinear sampling and RVF file I/O.

Conventions used throughout the package:

* a grid point (voxel) with index ``(i, j, k)`` sits at world position
  ``origin + index * spacing`` (the origin is the *center* of voxel (0,0,0));
* value buffers are stored as ``(nx, ny, nz)`` arrays, serialized x-fastest;
* world coordinates are in millimetres.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

# slack (in voxel units) granted at the node hull so positions computed from
# world_of() round-trip instead of falling off the edge
_HULL_EPS = 1e-9


class RvfError(ValueError):
    """Malformed RVF header or data file."""


def _as_triple(value, name: str) -> tuple:
    t = tuple(value)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class VoxelGrid:
    """Scalar field on a regular grid.

    ``values`` has shape ``dims`` and is made read-only on construction;
    grids are safe to share between threads.
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    values: np.ndarray

    def __post_init__(self):
        dims = _as_triple(self.dims, "dims")
        spacing = _as_triple(self.spacing, "spacing")
        origin = _as_triple(self.origin, "origin")
        if any(int(d) != d or d < 1 for d in dims):
            raise ValueError(f"dims must be positive integers, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in origin))
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != np.prod(self.dims):
            raise ValueError(
                f"values length {values.size} does not match dims {self.dims}"
            )
        values = values.reshape(self.dims)
        values = values.view()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def extent(self) -> np.ndarray:
        """World-size of the node hull per axis, (dims - 1) * spacing."""
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def world_bounds(self) -> tuple:
        lo = np.asarray(self.origin, dtype=float)
        return lo, lo + self.extent


def world_of(grid: VoxelGrid, index) -> np.ndarray:
    """World position (mm) of the voxel at ``index``."""
    idx = np.asarray(index)
    if idx.shape[-1] != 3:
        raise ValueError("index must have 3 components")
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
        raise IndexError(f"index {index} out of range for dims {grid.dims}")
    return np.asarray(grid.origin) + idx * np.asarray(grid.spacing)


def voxel_of(grid: VoxelGrid, point) -> tuple:
    """Index of the grid node nearest to a world point (no bounds check)."""
    rel = (np.asarray(point, dtype=float) - np.asarray(grid.origin)) / np.asarray(
        grid.spacing
    )
    return tuple(int(round(c)) for c in rel)


def _trilinear(values: np.ndarray, dims, spacing, origin, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    u = (pts - np.asarray(origin)) / np.asarray(spacing)
    n = np.asarray(dims)
    inside = np.all((u >= -_HULL_EPS) & (u <= (n - 1) + _HULL_EPS), axis=1)
    out = np.zeros(len(pts))
    if not np.any(inside):
        return out
    u = np.clip(u[inside], 0.0, n - 1)
    i0 = np.minimum(u.astype(np.int64), np.maximum(n - 2, 0))
    f = u - i0
    i1 = np.minimum(i0 + 1, n - 1)
    c = values
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    v = (
        c[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
        + c[x1, y0, z0] * fx * (1 - fy) * (1 - fz)
        + c[x0, y1, z0] * (1 - fx) * fy * (1 - fz)
        + c[x0, y0, z1] * (1 - fx) * (1 - fy) * fz
        + c[x1, y1, z0] * fx * fy * (1 - fz)
        + c[x1, y0, z1] * fx * (1 - fy) * fz
        + c[x0, y1, z1] * (1 - fx) * fy * fz
        + c[x1, y1, z1] * fx * fy * fz
    )
    out[inside] = v
    return out


def sample_trilinear(grid: VoxelGrid, points):
    """Trilinear interpolation at world points; outside the node hull returns 0.

    Accepts a single (3,) point or an (N, 3) array; returns a scalar or (N,)
    array accordingly.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    out = _trilinear(grid.values, grid.dims, grid.spacing, grid.origin, pts)
    return float(out[0]) if single else out


def _resample_dims(extent, target: float) -> tuple:
    # epsilon guard so an exact integer ratio does not round up a node
    return tuple(int(np.ceil((e - 1e-9) / target)) + 1 for e in extent)


def resample_isotropic(grid: VoxelGrid, target_spacing: float) -> VoxelGrid:
    """Resample onto an isotropic grid covering the same world extent.

    New node positions falling (by less than one target spacing) outside the
    source hull are clamped to the hull edge, so constant fields stay constant.
    """
    if target_spacing <= 0:
        raise ValueError("target_spacing must be > 0")
    new_dims = _resample_dims(grid.extent, target_spacing)
    xs = [np.asarray(grid.origin)[a] + target_spacing * np.arange(new_dims[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*xs, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    lo, hi = grid.world_bounds()
    pts = np.clip(pts, lo, hi)
    vals = _trilinear(grid.values, grid.dims, grid.spacing, grid.origin, pts)
    return VoxelGrid(
        dims=new_dims,
        spacing=(target_spacing,) * 3,
        origin=grid.origin,
        values=vals.reshape(new_dims),
    )


N_CLASSES = 4  # background, first rib, twelfth rib, intermediate rib


@dataclass(frozen=True)
class ProbabilityMap:
    """Four class-probability channels sharing one grid geometry."""

    dims: tuple
    spacing: tuple
    origin: tuple
    channels: np.ndarray = field(repr=False)

    def __post_init__(self):
        geom = VoxelGrid(
            self.dims, self.spacing, self.origin, np.zeros(_as_triple(self.dims, "dims"))
        )
        object.__setattr__(self, "dims", geom.dims)
        object.__setattr__(self, "spacing", geom.spacing)
        object.__setattr__(self, "origin", geom.origin)
        ch = np.asarray(self.channels, dtype=np.float64)
        expected = (N_CLASSES,) + self.dims
        if ch.size != np.prod(expected):
            raise ValueError(f"channels must have shape {expected}")
        ch = ch.reshape(expected)
        if ch.min() < -1e-9 or ch.max() > 1 + 1e-9:
            raise ValueError("probability values must lie in [0, 1]")
        ch = np.clip(ch, 0.0, 1.0)
        ch.flags.writeable = False
        object.__setattr__(self, "channels", ch)

    def channel(self, c: int) -> VoxelGrid:
        return VoxelGrid(self.dims, self.spacing, self.origin, self.channels[c])

    def geometry(self) -> VoxelGrid:
        return VoxelGrid(self.dims, self.spacing, self.origin, np.zeros(self.dims))


def resample_map_isotropic(pmap: ProbabilityMap, target_spacing: float) -> ProbabilityMap:
    resampled = [
        resample_isotropic(pmap.channel(c), target_spacing).values
        for c in range(N_CLASSES)
    ]
    first = resample_isotropic(pmap.channel(0), target_spacing)
    return ProbabilityMap(
        dims=first.dims,
        spacing=first.spacing,
        origin=first.origin,
        channels=np.stack(resampled),
    )


# ---------------------------------------------------------------------------
# RVF: text header + raw little-endian float32 data, x-fastest, channel-major.


def _format_numbers(vals) -> str:
    return " ".join(repr(float(v)) if isinstance(v, float) or v != int(v) else str(int(v)) for v in vals)


def write_rvf(path_prefix: str, volume) -> tuple:
    """Write a VoxelGrid or ProbabilityMap as <prefix>.rvf + <prefix>.raw."""
    header_path = path_prefix + ".rvf"
    data_path = path_prefix + ".raw"
    if isinstance(volume, ProbabilityMap):
        nch = N_CLASSES
        bufs = [volume.channels[c] for c in range(nch)]
    else:
        nch = 1
        bufs = [volume.values]
    raw = np.concatenate([b.ravel(order="F") for b in bufs]).astype("<f4")
    with open(data_path, "wb") as f:
        f.write(raw.tobytes())
    lines = [
        f"dims = {' '.join(str(d) for d in volume.dims)}",
        f"spacing = {_format_numbers(volume.spacing)}",
        f"origin = {_format_numbers(volume.origin)}",
        f"channels = {nch}",
        f"data_file = {os.path.basename(data_path)}",
    ]
    with open(header_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return header_path, data_path


def read_rvf(header_path: str):
    """Read an RVF file; returns a VoxelGrid (1 channel) or ProbabilityMap (4)."""
    fields = {}
    try:
        with open(header_path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise RvfError(f"{header_path}:{lineno}: expected 'key = value'")
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
    except OSError as e:
        raise RvfError(f"cannot read RVF header: {e}") from e
    for required in ("dims", "spacing", "origin", "channels", "data_file"):
        if required not in fields:
            raise RvfError(f"{header_path}: missing header field '{required}'")
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        origin = tuple(float(v) for v in fields["origin"].split())
        nch = int(fields["channels"])
    except ValueError as e:
        raise RvfError(f"{header_path}: bad header value: {e}") from e
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise RvfError(f"{header_path}: dims/spacing/origin must have 3 components")
    if nch not in (1, N_CLASSES):
        raise RvfError(f"{header_path}: channels must be 1 or {N_CLASSES}, got {nch}")
    data_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), fields["data_file"])
    try:
        raw = np.fromfile(data_path, dtype="<f4")
    except OSError as e:
        raise RvfError(f"cannot read RVF data: {e}") from e
    nvox = int(np.prod(dims))
    if raw.size != nvox * nch:
        raise RvfError(
            f"{data_path}: expected {nvox * nch} float32 values, found {raw.size}"
        )
    bufs = [
        raw[c * nvox : (c + 1) * nvox].reshape(dims, order="F") for c in range(nch)
    ]
    if nch == 1:
        return VoxelGrid(dims, spacing, origin, bufs[0])
    return ProbabilityMap(dims, spacing, origin, np.stack(bufs))
