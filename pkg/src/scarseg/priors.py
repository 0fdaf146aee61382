"""Probabilistic label priors built from an anatomical segmentation.

The wall prior is an unnormalized Gaussian of the distance to the
segmentation boundary (peak 1 on the boundary itself), truncated to a
finite support radius; the background channel is its complement so the
two channels sum to one everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import LabelVolume, ScalarVolume, VolumeGrid


@dataclass
class PriorMap:
    """Per-voxel label probabilities, one channel per label.

    channels has shape (n_labels, n_voxels); at every voxel the channel
    values are in [0, 1] and sum to 1.
    """

    grid: VolumeGrid
    channels: np.ndarray
    names: tuple[str, ...] = ("background", "wall")

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[1] != self.grid.n_voxels:
            raise ValueError("channels must have shape (n_labels, n_voxels)")
        self.names = tuple(self.names)
        if len(self.names) != self.channels.shape[0]:
            raise ValueError("need one channel name per channel")
        self.validate()

    @property
    def n_labels(self) -> int:
        return self.channels.shape[0]

    def validate(self, tol: float = 1e-6):
        if np.any(self.channels < -tol) or np.any(self.channels > 1.0 + tol):
            raise ValueError("prior channel values must lie in [0, 1]")
        sums = self.channels.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > tol):
            raise ValueError("prior channels must sum to 1 at every voxel")

    def channel_volume(self, k: int) -> ScalarVolume:
        """Channel k as a sampleable volume; outside the grid the prior is 0."""
        return ScalarVolume(self.grid, self.channels[k], background=0.0)


def distance_to_boundary(seg: LabelVolume) -> ScalarVolume:
    """Unsigned Euclidean distance (mm) from each voxel center to the nearest
    boundary face between foreground (label > 0) and background.

    Distances are measured to face centers and are exact on the voxel
    lattice: the boundary face centers live on a 2x refined lattice, where a
    point-set Euclidean distance transform is exact.
    """
    fg = seg.as_array() > 0
    if not fg.any():
        raise ValueError("segmentation has no foreground")
    if fg.all():
        raise ValueError("segmentation has no background")

    nx, ny, nz = seg.grid.dims
    fine = np.zeros((2 * nx - 1, 2 * ny - 1, 2 * nz - 1), dtype=bool)
    bx = fg[:-1] != fg[1:]
    by = fg[:, :-1] != fg[:, 1:]
    bz = fg[:, :, :-1] != fg[:, :, 1:]
    fine[1::2, ::2, ::2] = bx
    fine[::2, 1::2, ::2] = by
    fine[::2, ::2, 1::2] = bz
    if not fine.any():
        # foreground and background both present but never face-adjacent
        # cannot happen on a connected lattice; guard anyway
        raise ValueError("segmentation has no foreground/background boundary")

    half = np.asarray(seg.grid.spacing) / 2.0
    dist = ndimage.distance_transform_edt(~fine, sampling=half)
    return ScalarVolume.from_array(dist[::2, ::2, ::2], seg.grid)


def wall_prior_from_segmentation(
    seg: LabelVolume, sigma: float = 2.0, truncation: float | None = None
) -> PriorMap:
    """Two-channel prior from a blood-pool segmentation.

    wall(x) = exp(-d(x)^2 / (2 sigma^2)) with d the unsigned distance to the
    segmentation boundary, clamped to 0 beyond `truncation` (default 4 sigma);
    background(x) = 1 - wall(x).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if truncation is None:
        truncation = 4.0 * sigma
    d = distance_to_boundary(seg).values
    wall = np.exp(-(d * d) / (2.0 * sigma * sigma))
    wall[d > truncation] = 0.0
    return PriorMap(seg.grid, np.stack([1.0 - wall, wall]), ("background", "wall"))


def fuse_labels_majority(atlas_labels: list[LabelVolume]) -> LabelVolume:
    """Per-voxel modal label across atlases; ties go to the lowest label id."""
    if len(atlas_labels) == 0:
        raise ValueError("need at least one atlas")
    grid = atlas_labels[0].grid
    for a in atlas_labels[1:]:
        if a.grid != grid:
            raise ValueError("atlas grids must match")
    stacked = np.stack([a.labels for a in atlas_labels])
    max_label = int(stacked.max())
    counts = np.zeros((max_label + 1, grid.n_voxels), dtype=np.int32)
    for lab in range(max_label + 1):
        counts[lab] = (stacked == lab).sum(axis=0)
    # argmax returns the first maximum, i.e. the lowest label id on ties
    fused = counts.argmax(axis=0)
    return LabelVolume(grid, fused)
