"""Surface-projected scar quantification and the reference baselines.

The anatomical surface is realized as the 6-connected boundary voxel shell
of the foreground segmentation.  Scar classifications project onto the
shell by a nearest-distance rule, and all evaluation metrics are computed
over shell elements with scar as the positive class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import LabelVolume, ScalarVolume, VolumeGrid
from .mixture import (
    MvmmParams,
    TissueConfig,
    classify,
    e_step_from_context,
    init_params,
    m_step_from_context,
    model_context,
    sample_state,
)
from .priors import PriorMap
from .transforms import TransformSet

DEFAULT_PROJECTION_MM = 3.0


@dataclass
class SurfaceShell:
    """Boundary voxels of a foreground segmentation, with per-element flags.

    indices are flat voxel indices (x fastest), sorted and duplicate-free;
    positions are the corresponding voxel centers in mm.
    """

    grid: VolumeGrid
    indices: np.ndarray
    positions: np.ndarray
    scar: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.scar = np.asarray(self.scar, dtype=bool)
        if self.indices.ndim != 1 or len(self.positions) != len(self.indices) \
                or len(self.scar) != len(self.indices):
            raise ValueError("indices, positions and flags must align")
        if len(self.indices) and (np.any(np.diff(self.indices) <= 0)):
            raise ValueError("element indices must be strictly increasing")

    @property
    def n_elements(self) -> int:
        return len(self.indices)

    def with_flags(self, flags) -> "SurfaceShell":
        return SurfaceShell(self.grid, self.indices.copy(), self.positions.copy(),
                            np.asarray(flags, dtype=bool))


def extract_shell(seg: LabelVolume) -> SurfaceShell:
    """Foreground voxels with at least one 6-neighbor of background.

    Any nonzero label counts as foreground, so the shell does not depend on
    how foreground labels are numbered.  Out-of-bounds counts as background.
    """
    fg = seg.as_array() > 0
    if not fg.any():
        raise ValueError("segmentation has no foreground voxels")
    padded = np.pad(fg, 1, constant_values=False)
    interior = (
        padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
        & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2]
    )
    shell = fg & ~interior
    ix, iy, iz = np.nonzero(shell)
    flat = seg.grid.flat_index(ix, iy, iz)
    order = np.argsort(flat)
    idx = np.stack([ix, iy, iz], axis=1)[order]
    positions = seg.grid.index_to_world(idx)
    return SurfaceShell(seg.grid, flat[order], positions, np.zeros(len(flat), dtype=bool))


def project_scar(shell: SurfaceShell, scar_map: LabelVolume,
                 max_dist: float = DEFAULT_PROJECTION_MM) -> SurfaceShell:
    """Flag each shell element whose distance to the nearest scar voxel
    center is at most max_dist (mm)."""
    if max_dist < 0:
        raise ValueError("max_dist must be non-negative")
    if scar_map.grid != shell.grid:
        raise ValueError("scar map and shell live on different grids")
    scar = scar_map.as_array() > 0
    if not scar.any():
        return shell.with_flags(np.zeros(shell.n_elements, dtype=bool))
    dist = ndimage.distance_transform_edt(~scar, sampling=shell.grid.spacing)
    flags = dist.ravel(order="F")[shell.indices] <= max_dist
    return shell.with_flags(flags)


@dataclass
class MetricsReport:
    """Confusion counts over shell elements and the derived scores.

    Scar is the positive class.  A score whose denominator is zero (no
    eligible elements) reports 1.0, reading the statement as vacuously true.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    dice: float
    accuracy: float
    sensitivity: float
    specificity: float

    CSV_HEADER = "dice,accuracy,sensitivity,specificity,tp,fp,tn,fn"

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "MetricsReport":
        if min(tp, fp, tn, fn) < 0:
            raise ValueError("confusion counts must be non-negative")

        def ratio(num, den):
            return num / den if den > 0 else 1.0

        return cls(
            tp=tp, fp=fp, tn=tn, fn=fn,
            dice=ratio(2 * tp, 2 * tp + fp + fn),
            accuracy=ratio(tp + tn, tp + tn + fp + fn),
            sensitivity=ratio(tp, tp + fn),
            specificity=ratio(tn, tn + fp),
        )

    def to_dict(self) -> dict:
        return {
            "dice": self.dice, "accuracy": self.accuracy,
            "sensitivity": self.sensitivity, "specificity": self.specificity,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv_row(self) -> str:
        return (f"{self.dice:.6f},{self.accuracy:.6f},{self.sensitivity:.6f},"
                f"{self.specificity:.6f},{self.tp},{self.fp},{self.tn},{self.fn}")


def surface_metrics(pred: SurfaceShell, truth: SurfaceShell) -> MetricsReport:
    """Confusion-matrix scores between two flaggings of the same shell."""
    if pred.n_elements != truth.n_elements or np.any(pred.indices != truth.indices):
        raise ValueError("shells cover different element sets")
    p, t = pred.scar, truth.scar
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    tn = int(np.sum(~p & ~t))
    fn = int(np.sum(~p & t))
    return MetricsReport.from_counts(tp, fp, tn, fn)


def otsu_threshold(values) -> float:
    """Histogram threshold (256 bins) maximizing between-class variance.

    Returns the upper edge of the split bin; exact variance ties resolve to
    the lower threshold.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2 or np.all(v == v[0]):
        raise ValueError("need at least two distinct values")
    hist, edges = np.histogram(v, bins=256)
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    omega = np.cumsum(p)[:-1]
    mu_cum = np.cumsum(p * centers)[:-1]
    mu_total = float(np.sum(p * centers))
    valid = (omega > 0.0) & (omega < 1.0)
    between = np.zeros(255)
    between[valid] = (mu_total * omega[valid] - mu_cum[valid]) ** 2 \
        / (omega[valid] * (1.0 - omega[valid]))
    split = int(np.argmax(between))
    return float(edges[split + 1])


def otsu_scar_map(
    image: ScalarVolume,
    prior: PriorMap,
    wall_threshold: float = 0.5,
) -> tuple[LabelVolume, LabelVolume, float]:
    """Threshold baseline: scar = intensities above the Otsu threshold inside
    the prior's wall region (wall channel >= wall_threshold).

    Returns the wall mask, the scar map and the threshold used.  When the
    masked intensities cannot be thresholded (fewer than two distinct
    values) the scar map is empty and the threshold is their maximum.
    """
    if image.grid != prior.grid:
        raise ValueError("threshold baseline expects the image on the prior grid")
    wall_idx = prior.names.index("wall") if "wall" in prior.names else prior.n_labels - 1
    mask = prior.channels[wall_idx] >= wall_threshold
    labels = LabelVolume(image.grid, mask.astype(np.int32))
    masked = image.values[mask]
    if masked.size < 2 or np.all(masked == masked[0]):
        threshold = float(masked.max()) if masked.size else 0.0
        return labels, LabelVolume(image.grid, np.zeros(image.grid.n_voxels, dtype=np.int32)), threshold
    threshold = otsu_threshold(masked)
    scar = mask & (image.values > threshold)
    return labels, LabelVolume(image.grid, scar.astype(np.int32)), threshold


def gmm_baseline(
    image: ScalarVolume,
    prior: PriorMap,
    config: TissueConfig | None = None,
    max_iters: int = 100,
    rel_tol: float = 1e-7,
) -> tuple[LabelVolume, LabelVolume]:
    """Single-image mixture fit with the same prior and identity transforms.

    The joint model restricted to one image; no registration.  Label
    proportions stay at the prior's voxel average: one channel leaves them
    weakly identified, and re-estimating them lets a wall component drift
    onto the blood pool and inflate the wall share.  The wall gets a third
    component by default for the same reason, so boundary intensities that
    a second image would disambiguate have a mode of their own.  Returns
    the label map and the scar map, classified the same way as the full
    model.
    """
    if config is None:
        config = TissueConfig(("background", "wall"), ((2, 3),))
    if config.n_images != 1:
        raise ValueError("the single-image baseline takes a one-image config")
    transforms = TransformSet.identity_for_domain(prior.grid, 1)
    params = init_params(prior, [image], config, transforms)
    pi0 = params.label_proportions
    state = sample_state([image], prior, transforms)
    ctx = model_context(params, state)
    prev = ctx.ll
    for _ in range(max_iters):
        posteriors = e_step_from_context(ctx)
        params = m_step_from_context(ctx, posteriors)
        params = MvmmParams(config, pi0, params.components, params.sigma_floors)
        ctx = model_context(params, state)
        if ctx.ll - prev < rel_tol * max(abs(prev), 1.0):
            break
        prev = ctx.ll
    posteriors = e_step_from_context(ctx)
    return classify(posteriors, params, scar_image=0)
