"""Input coercion and checking helpers shared by the estimators and CLI."""

from __future__ import annotations

import numpy as np

from .grid import LabelVolume, ScalarVolume, VolumeGrid
from .priors import PriorMap


def as_scalar_volume(x, grid: VolumeGrid | None = None, background: float = 0.0) -> ScalarVolume:
    """Accept a ScalarVolume, a LabelVolume, or a 3-D array (needs a grid)."""
    if isinstance(x, ScalarVolume):
        return x
    if isinstance(x, LabelVolume):
        return ScalarVolume(x.grid, x.labels.astype(np.float64), background)
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D array or volume, got shape {arr.shape}")
    if grid is None:
        grid = VolumeGrid(arr.shape)
    return ScalarVolume.from_array(arr, grid, background)


def as_image_list(X, grid: VolumeGrid | None = None) -> list[ScalarVolume]:
    """Accept a volume, a sequence of volumes, or a (n_images, nx, ny, nz) array."""
    if isinstance(X, (ScalarVolume, LabelVolume)):
        return [as_scalar_volume(X)]
    arr = np.asarray(X, dtype=object) if isinstance(X, (list, tuple)) else X
    if isinstance(arr, np.ndarray) and arr.dtype != object:
        if arr.ndim == 3:
            return [as_scalar_volume(arr, grid)]
        if arr.ndim == 4:
            return [as_scalar_volume(arr[i], grid) for i in range(arr.shape[0])]
        raise ValueError(f"expected 3-D or 4-D image data, got shape {arr.shape}")
    return [as_scalar_volume(x, grid) for x in X]


def check_prior(prior) -> PriorMap:
    if not isinstance(prior, PriorMap):
        raise TypeError(f"expected a PriorMap, got {type(prior).__name__}")
    prior.validate()
    return prior


def check_compatible(images: list[ScalarVolume], prior: PriorMap):
    """The model samples images through transforms, so grids may differ, but
    they must at least intersect the analysis domain."""
    from .grid import grids_overlap

    for i, img in enumerate(images):
        if not grids_overlap(img.grid, prior.grid):
            raise ValueError(f"image {i} does not overlap the prior domain")
