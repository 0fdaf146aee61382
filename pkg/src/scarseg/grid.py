"""Volumetric grids, scalar/label volumes and world-coordinate sampling.

All volumes live on axis-aligned grids: world = origin + index * spacing,
row-major storage with x fastest.  Sampling is trilinear with constant
background padding outside the grid, so every operation is defined for any
finite world point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class VolumeGrid:
    """Axis-aligned voxel lattice.

    dims    -- number of voxels along (x, y, z), each >= 1
    spacing -- voxel size in mm, strictly positive
    origin  -- world coordinate (mm) of the center of voxel (0, 0, 0)
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be three integers >= 1, got {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive finite floats, got {self.spacing}")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise ValueError(f"origin must be three finite floats, got {self.origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (n_voxels, 3), x fastest."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1)
        return self.index_to_world(idx)

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_index(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def flat_index(self, ix, iy, iz) -> np.ndarray:
        """Row-major flat index with x fastest: flat = ix + nx*(iy + ny*iz)."""
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi

    def center(self) -> np.ndarray:
        lo, hi = self.world_bounds()
        return 0.5 * (lo + hi)


def _check_values(grid: VolumeGrid, values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim != 1:
        values = values.reshape(-1)
    if values.size != grid.n_voxels:
        raise ValueError(
            f"{name} length {values.size} does not match grid with {grid.n_voxels} voxels"
        )
    return values


@dataclass
class ScalarVolume:
    """Scalar image on a grid; values stored flat, row-major with x fastest."""

    grid: VolumeGrid
    values: np.ndarray
    background: float = 0.0

    def __post_init__(self):
        self.values = np.ascontiguousarray(
            _check_values(self.grid, self.values, "values"), dtype=np.float64
        )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ScalarVolume values must all be finite")
        self.background = float(self.background)

    def as_array(self) -> np.ndarray:
        """3-D view with shape dims, index order (x, y, z)."""
        return self.values.reshape(self.grid.dims, order="F")

    @classmethod
    def from_array(cls, arr, grid: VolumeGrid, background: float = 0.0) -> "ScalarVolume":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != grid.dims:
            raise ValueError(f"array shape {arr.shape} does not match grid dims {grid.dims}")
        return cls(grid, arr.ravel(order="F"), background)


@dataclass
class LabelVolume:
    """Integer label image on a grid; same storage convention as ScalarVolume."""

    grid: VolumeGrid
    labels: np.ndarray
    label_set: tuple[int, ...] | None = field(default=None)

    def __post_init__(self):
        labels = _check_values(self.grid, self.labels, "labels")
        if not np.issubdtype(np.asarray(labels).dtype, np.integer):
            as_int = np.asarray(labels)
            rounded = np.rint(as_int)
            if not np.array_equal(as_int, rounded):
                raise ValueError("labels must be integers")
            labels = rounded
        self.labels = np.ascontiguousarray(labels, dtype=np.int32)
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        if self.label_set is not None:
            allowed = set(int(v) for v in self.label_set)
            present = set(np.unique(self.labels).tolist())
            if not present <= allowed:
                raise ValueError(f"labels {sorted(present - allowed)} outside declared set {sorted(allowed)}")

    def as_array(self) -> np.ndarray:
        return self.labels.reshape(self.grid.dims, order="F")

    @classmethod
    def from_array(cls, arr, grid: VolumeGrid, label_set=None) -> "LabelVolume":
        arr = np.asarray(arr)
        if arr.shape != grid.dims:
            raise ValueError(f"array shape {arr.shape} does not match grid dims {grid.dims}")
        return cls(grid, arr.ravel(order="F"), label_set)


def _corner_values(vol: ScalarVolume, i0: np.ndarray, offsets) -> np.ndarray:
    """Gather voxel values at i0 + offset with constant background padding."""
    nx, ny, nz = vol.grid.dims
    ix = i0[:, 0] + offsets[0]
    iy = i0[:, 1] + offsets[1]
    iz = i0[:, 2] + offsets[2]
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    flat = vol.grid.flat_index(np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1))
    out = vol.values[flat]
    return np.where(inside, out, vol.background)


def _prepare_points(p) -> tuple[np.ndarray, bool]:
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3:
        raise ValueError(f"points must have shape (3,) or (N, 3), got {np.shape(p)}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    return pts, single


def sample_trilinear(vol: ScalarVolume, p) -> float | np.ndarray:
    """Trilinear interpolation of `vol` at world point(s) `p` (mm).

    Out-of-grid points blend toward and eventually return the volume's
    background constant; this is defined behavior, not an error.
    """
    pts, single = _prepare_points(p)
    q = vol.grid.world_to_index(pts)
    out = ndimage.map_coordinates(
        vol.as_array(), q.T, order=1, mode="grid-constant",
        cval=vol.background, prefilter=False,
    )
    return float(out[0]) if single else out


def sample_gradient(vol: ScalarVolume, p) -> np.ndarray:
    """Spatial gradient (mm^-1 units) of the trilinear interpolant at `p`.

    The derivative is taken inside the interpolation cell containing the
    point (the interpolant is affine along each axis there, so this equals
    a vanishing-step central difference); on a lattice plane the cell on
    the positive side is used.  Outside the padded support the interpolant
    is the background constant and the gradient is zero.
    """
    pts, single = _prepare_points(p)
    q = vol.grid.world_to_index(pts)
    i0 = np.floor(q).astype(np.int64)
    u = q - i0

    c = {}
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c[dx, dy, dz] = _corner_values(vol, i0, (dx, dy, dz))

    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    vx, vy, vz = 1.0 - ux, 1.0 - uy, 1.0 - uz
    # d/du of the trilinear form: difference along one axis, blend the others
    gx = (
        vy * vz * (c[1, 0, 0] - c[0, 0, 0])
        + uy * vz * (c[1, 1, 0] - c[0, 1, 0])
        + vy * uz * (c[1, 0, 1] - c[0, 0, 1])
        + uy * uz * (c[1, 1, 1] - c[0, 1, 1])
    )
    gy = (
        vx * vz * (c[0, 1, 0] - c[0, 0, 0])
        + ux * vz * (c[1, 1, 0] - c[1, 0, 0])
        + vx * uz * (c[0, 1, 1] - c[0, 0, 1])
        + ux * uz * (c[1, 1, 1] - c[1, 0, 1])
    )
    gz = (
        vx * vy * (c[0, 0, 1] - c[0, 0, 0])
        + ux * vy * (c[1, 0, 1] - c[1, 0, 0])
        + vx * uy * (c[0, 1, 1] - c[0, 1, 0])
        + ux * uy * (c[1, 1, 1] - c[1, 1, 0])
    )
    grad = np.stack([gx, gy, gz], axis=1) / np.asarray(vol.grid.spacing)
    return grad[0] if single else grad


def grids_overlap(a: VolumeGrid, b: VolumeGrid) -> bool:
    alo, ahi = a.world_bounds()
    blo, bhi = b.world_bounds()
    return bool(np.all(ahi >= blo) and np.all(bhi >= alo))


def resample_to_grid(vol: ScalarVolume, target: VolumeGrid) -> ScalarVolume:
    """Resample `vol` onto `target` by trilinear interpolation at its voxel centers."""
    if not grids_overlap(vol.grid, target):
        raise ValueError("source and target grids are spatially disjoint")
    values = sample_trilinear(vol, target.voxel_centers())
    return ScalarVolume(target, values, vol.background)
