"""Synthetic two-modality phantom with known geometry and transforms.

The anatomy is an ellipsoidal blood pool wrapped in a wall of constant
ray thickness; scar occupies angular sectors of the wall.  Each image is
rendered in its own space by evaluating the geometry at the inverse of
that image's ground-truth transform, so a fit starting from identity must
recover the transform.  All randomness comes from a counter-based
generator keyed on the seed, making outputs byte-identical across runs
and platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import LabelVolume, ScalarVolume, VolumeGrid
from .priors import PriorMap, wall_prior_from_segmentation
from .transforms import AffineTransform, FfdTransform, TransformSet, TransformStack

BACKGROUND, BLOOD_POOL, WALL, SCAR = 0, 1, 2, 3


@dataclass(frozen=True)
class ScarPatch:
    """Angular sector of the wall: azimuth and polar angle ranges (radians)."""

    azimuth: tuple[float, float]
    polar: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.azimuth
        if not -math.pi <= lo < hi <= math.pi:
            raise ValueError("azimuth range must satisfy -pi <= lo < hi <= pi")
        plo, phi = self.polar
        if not 0.0 <= plo < phi <= math.pi:
            raise ValueError("polar range must satisfy 0 <= lo < hi <= pi")


@dataclass(frozen=True)
class ModalityIntensities:
    """(mu, sigma) per tissue class for one image."""

    background: tuple[float, float]
    blood_pool: tuple[float, float]
    wall: tuple[float, float]
    scar: tuple[float, float]

    def __post_init__(self):
        for name in ("background", "blood_pool", "wall", "scar"):
            mu, sigma = getattr(self, name)
            if sigma <= 0 or not math.isfinite(sigma) or not math.isfinite(mu):
                raise ValueError(f"{name} needs finite mu and positive sigma")

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        rows = [self.background, self.blood_pool, self.wall, self.scar]
        return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])


LGE_DEFAULT = ModalityIntensities(
    background=(40.0, 6.0), blood_pool=(110.0, 8.0), wall=(80.0, 7.0), scar=(140.0, 9.0)
)
ANATOMICAL_DEFAULT = ModalityIntensities(
    background=(30.0, 6.0), blood_pool=(160.0, 8.0), wall=(75.0, 7.0), scar=(75.0, 7.0)
)


@dataclass
class PhantomSpec:
    """Geometry, intensity model and ground-truth transforms for one phantom."""

    grid: VolumeGrid
    center: tuple[float, float, float] | None = None
    radii: tuple[float, float, float] = (18.0, 14.0, 12.0)
    wall_thickness: float = 4.0
    scar_patches: tuple[ScarPatch, ...] = (
        ScarPatch(azimuth=(-2.4, -0.4), polar=(0.6, 1.7)),
        ScarPatch(azimuth=(0.7, 2.5), polar=(1.1, 2.5)),
    )
    intensities: tuple[ModalityIntensities, ...] = (LGE_DEFAULT, ANATOMICAL_DEFAULT)
    seed: int = 0
    true_transforms: list[TransformStack] | None = None
    prior_sigma: float = 2.0

    def __post_init__(self):
        if self.center is None:
            self.center = tuple(self.grid.center())
        self.center = tuple(float(c) for c in self.center)
        self.radii = tuple(float(r) for r in self.radii)
        if min(self.radii) <= 0:
            raise ValueError("ellipsoid radii must be positive")
        if self.wall_thickness <= 0:
            raise ValueError("wall thickness must be positive")
        if self.prior_sigma <= 0:
            raise ValueError("prior sigma must be positive")
        if len(self.intensities) < 1:
            raise ValueError("need intensities for at least one image")
        lo, hi = self.grid.world_bounds()
        outer = np.asarray(self.radii) + self.wall_thickness
        if np.any(np.asarray(self.center) - outer < lo) or np.any(np.asarray(self.center) + outer > hi):
            raise ValueError("phantom geometry is not contained in the grid")
        if self.true_transforms is not None and len(self.true_transforms) != len(self.intensities):
            raise ValueError("need one ground-truth transform per image")

    @property
    def n_images(self) -> int:
        return len(self.intensities)


@dataclass
class PhantomResult:
    images: list[ScalarVolume]
    labels: LabelVolume
    scar: LabelVolume
    prior: PriorMap
    true_transforms: TransformSet

    def __iter__(self):
        return iter((self.images, self.labels, self.scar, self.prior, self.true_transforms))


def class_at(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Tissue class codes (0 bg, 1 pool, 2 wall, 3 scar) at world points."""
    rel = np.atleast_2d(pts) - np.asarray(spec.center)
    radii = np.asarray(spec.radii)
    dist = np.linalg.norm(rel, axis=1)
    r = np.linalg.norm(rel / radii, axis=1)
    pool = r <= 1.0

    safe = np.where(dist > 0, dist, 1.0)
    unit = rel / safe[:, None]
    unorm = np.linalg.norm(unit / radii, axis=1)
    ray = 1.0 / np.where(unorm > 0, unorm, 1.0)
    wall = ~pool & (dist <= ray + spec.wall_thickness)

    azimuth = np.arctan2(rel[:, 1], rel[:, 0])
    polar = np.arccos(np.clip(rel[:, 2] / safe, -1.0, 1.0))
    scar = np.zeros(len(rel), dtype=bool)
    for patch in spec.scar_patches:
        inside = (
            (azimuth >= patch.azimuth[0]) & (azimuth < patch.azimuth[1])
            & (polar >= patch.polar[0]) & (polar < patch.polar[1])
        )
        scar |= wall & inside
    codes = np.where(scar, SCAR, np.where(wall, WALL, np.where(pool, BLOOD_POOL, BACKGROUND)))
    return codes.astype(np.int32)


def invert_points(stack: TransformStack, y: np.ndarray,
                  max_iters: int = 60, tol: float = 1e-10) -> np.ndarray:
    """Solve F(x) = y for x: exact affine inverse, fixed point for the FFD.

    Converges for the moderate deformations used here (displacement
    Jacobian well below 1 relative to the control spacing).
    """
    pts = np.atleast_2d(np.asarray(y, dtype=np.float64))
    aff = stack.affine
    w = np.linalg.solve(aff.matrix, (pts - aff.center - aff.translation).T).T + aff.center
    x = w.copy()
    for _ in range(max_iters):
        x_next = w - stack.ffd.displacement(x)
        if float(np.max(np.abs(x_next - x))) < tol:
            return x_next
        x = x_next
    return x


def random_smooth_ffd(grid: VolumeGrid, amplitude: float, seed: int,
                      control_spacing: float = 12.0) -> FfdTransform:
    """Random displacement field with max control displacement = amplitude mm."""
    ffd = FfdTransform.for_domain(grid, control_spacing)
    rng = np.random.Generator(np.random.Philox(key=seed))
    disp = rng.standard_normal((ffd.n_control, 3))
    top = float(np.max(np.abs(disp)))
    if top > 0 and amplitude > 0:
        disp *= amplitude / top
    else:
        disp[:] = 0.0
    return FfdTransform(ffd.control_origin, ffd.control_spacing, ffd.control_dims, disp)


def _image_rng(seed: int, image: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(seed << 16) + image))


def generate_phantom(spec: PhantomSpec) -> PhantomResult:
    """Render images, truth maps, the prior and the ground-truth transforms."""
    grid = spec.grid
    pts = grid.voxel_centers()

    codes = class_at(spec, pts)
    labels = LabelVolume(grid, np.where(codes == SCAR, WALL, codes))
    scar = LabelVolume(grid, (codes == SCAR).astype(np.int32))

    if spec.true_transforms is None:
        stacks = [TransformStack.identity_for_domain(grid) for _ in range(spec.n_images)]
    else:
        stacks = list(spec.true_transforms)

    images = []
    for i, modality in enumerate(spec.intensities):
        mu, sigma = modality.as_arrays()
        stack = stacks[i]
        params = stack.parameters()
        if np.array_equal(params[:12], np.r_[np.eye(3).ravel(), 0.0, 0.0, 0.0]) \
                and not params[12:].any():
            image_codes = codes
        else:
            image_codes = class_at(spec, invert_points(stack, pts))
        noise = _image_rng(spec.seed, i).standard_normal(grid.n_voxels)
        values = mu[image_codes] + sigma[image_codes] * noise
        images.append(ScalarVolume(grid, values, background=float(mu[BACKGROUND])))

    pool = LabelVolume(grid, (codes == BLOOD_POOL).astype(np.int32))
    prior = wall_prior_from_segmentation(pool, sigma=spec.prior_sigma)

    transforms = TransformSet(stacks, TransformStack.identity_for_domain(grid))
    return PhantomResult(images, labels, scar, prior, transforms)
