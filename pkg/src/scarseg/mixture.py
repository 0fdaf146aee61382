"""Multivariate Gaussian mixture over co-registered volumes.

One hidden tissue label per common-space voxel generates conditionally
independent intensities in every image, each modeled by a per-tissue
Gaussian mixture.  The voxel-wise label prior blends a probabilistic prior
map (sampled through the map transform) with global label proportions.
The EM sweeps here treat the transforms as fixed; transform optimization
lives in the registration module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import LabelVolume, ScalarVolume, VolumeGrid, sample_trilinear
from .priors import PriorMap
from .transforms import TransformSet, TransformStack

LH_FLOOR = 1e-300
DEGENERATE_WEIGHT_FRAC = 1e-8


@dataclass(frozen=True)
class TissueConfig:
    """Label names and the Gaussian component count per (image, tissue)."""

    labels: tuple[str, ...] = ("background", "wall")
    components: tuple[tuple[int, ...], ...] = ((2, 2), (2, 1))

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("need at least one label")
        for row in self.components:
            if len(row) != len(self.labels):
                raise ValueError("each image needs one component count per label")
            if any(int(c) < 1 for c in row):
                raise ValueError("component counts must be >= 1")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def n_images(self) -> int:
        return len(self.components)

    def n_components(self, image: int, label: int) -> int:
        return int(self.components[image][label])


@dataclass
class GaussianComponent:
    """One intensity mode: mixing proportion, mean, standard deviation."""

    tau: float
    mu: float
    sigma: float

    def __post_init__(self):
        self.tau = float(self.tau)
        self.mu = float(self.mu)
        self.sigma = float(self.sigma)
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"component proportion must be in [0, 1], got {self.tau}")
        if self.sigma <= 0 or not math.isfinite(self.sigma):
            raise ValueError(f"component sigma must be positive, got {self.sigma}")


@dataclass
class MvmmParams:
    """Full model state: label proportions plus all Gaussian components.

    components maps (image, label) to the list of GaussianComponent for that
    pair.  sigma_floors holds the per-image lower bound on component sigma.
    """

    config: TissueConfig
    label_proportions: np.ndarray
    components: dict[tuple[int, int], list[GaussianComponent]]
    sigma_floors: np.ndarray | None = None

    def __post_init__(self):
        self.label_proportions = np.asarray(self.label_proportions, dtype=np.float64)
        if self.label_proportions.shape != (self.config.n_labels,):
            raise ValueError("need one proportion per label")
        if np.any(self.label_proportions < 0) or not np.all(np.isfinite(self.label_proportions)):
            raise ValueError("label proportions must be non-negative and finite")
        if self.sigma_floors is None:
            self.sigma_floors = np.full(self.config.n_images, 1e-12)
        self.sigma_floors = np.asarray(self.sigma_floors, dtype=np.float64)

    def validate(self, tau_tol: float = 1e-9):
        """Check the full invariant set (proportions normalized, sigmas floored)."""
        if abs(self.label_proportions.sum() - 1.0) > 1e-9:
            raise ValueError("label proportions must sum to 1")
        for i in range(self.config.n_images):
            for k in range(self.config.n_labels):
                comps = self.components[i, k]
                if len(comps) != self.config.n_components(i, k):
                    raise ValueError(f"component count mismatch at image {i}, label {k}")
                tau_sum = sum(c.tau for c in comps)
                if abs(tau_sum - 1.0) > tau_tol:
                    raise ValueError(f"component proportions at ({i},{k}) sum to {tau_sum}")
                for c in comps:
                    if c.sigma < self.sigma_floors[i] * (1.0 - 1e-12):
                        raise ValueError(f"sigma {c.sigma} below floor {self.sigma_floors[i]}")

    def component_arrays(self, image: int, label: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        comps = self.components[image, label]
        tau = np.array([c.tau for c in comps])
        mu = np.array([c.mu for c in comps])
        sigma = np.array([c.sigma for c in comps])
        return tau, mu, sigma

    def copy(self) -> "MvmmParams":
        return MvmmParams(
            self.config,
            self.label_proportions.copy(),
            {key: [GaussianComponent(c.tau, c.mu, c.sigma) for c in comps]
             for key, comps in self.components.items()},
            self.sigma_floors.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "labels": list(self.config.labels),
            "label_proportions": self.label_proportions.tolist(),
            "sigma_floors": self.sigma_floors.tolist(),
            "components": [
                [
                    [[c.tau, c.mu, c.sigma] for c in self.components[i, k]]
                    for k in range(self.config.n_labels)
                ]
                for i in range(self.config.n_images)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MvmmParams":
        labels = tuple(d["labels"])
        comps_nested = d["components"]
        config = TissueConfig(
            labels, tuple(tuple(len(ck) for ck in ci) for ci in comps_nested)
        )
        components = {
            (i, k): [GaussianComponent(*c) for c in comps_nested[i][k]]
            for i in range(config.n_images)
            for k in range(config.n_labels)
        }
        return cls(config, np.asarray(d["label_proportions"]), components,
                   np.asarray(d.get("sigma_floors", [1e-12] * config.n_images)))


@dataclass
class PosteriorField:
    """EM expectations: per-voxel label posteriors and component posteriors."""

    grid: VolumeGrid
    label_post: np.ndarray  # (n_labels, n_voxels)
    component_post: dict[tuple[int, int], np.ndarray]  # (image, label) -> (C, n_voxels)

    def validate(self, tol: float = 1e-6):
        if np.any(self.label_post < -tol) or np.any(self.label_post > 1 + tol):
            raise ValueError("label posteriors must lie in [0, 1]")
        if np.any(np.abs(self.label_post.sum(axis=0) - 1.0) > tol):
            raise ValueError("label posteriors must sum to 1 per voxel")
        for (i, k), post in self.component_post.items():
            if np.any(post < -tol):
                raise ValueError(f"negative component posterior at ({i},{k})")
            if np.any(np.abs(post.sum(axis=0) - self.label_post[k]) > tol):
                raise ValueError(f"component posteriors at ({i},{k}) do not sum to the label posterior")


def gaussian_pdf(mu, sigma, v, floor: float = 0.0):
    """Normal density (1 / (sigma sqrt(2 pi))) exp(-(v - mu)^2 / (2 sigma^2))."""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr <= 0) or np.any(sigma_arr < floor):
        raise ValueError("sigma must be positive and not below the floor")
    v = np.asarray(v, dtype=np.float64)
    z = (v - mu) / sigma_arr
    out = np.exp(-0.5 * z * z) / (sigma_arr * math.sqrt(2.0 * math.pi))
    return float(out) if out.ndim == 0 else out


def gaussian_pdf_dv(mu, sigma, v, floor: float = 0.0):
    """Derivative of gaussian_pdf with respect to the intensity value v."""
    pdf = gaussian_pdf(mu, sigma, v, floor)
    out = pdf * (mu - np.asarray(v, dtype=np.float64)) / (np.asarray(sigma) ** 2)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Evaluation state shared by the likelihood, EM sweeps and gradients


@dataclass
class SampleState:
    """Everything that depends on the transforms but not on the parameters."""

    omega: VolumeGrid
    points: np.ndarray                    # (N, 3) common-space voxel centers
    intensities: np.ndarray               # (n_images, N)  I_i(F_i(x))
    prior_values: np.ndarray              # (n_labels, N)  A_k(F_m(x))
    image_points: list[np.ndarray]        # y_i = F_i(x), one (N, 3) per image
    map_points: np.ndarray                # F_m(x)
    image_ffd_points: list[np.ndarray]    # D_i(x) (pre-affine), for gradients
    map_ffd_points: np.ndarray


def sample_state(
    images: list[ScalarVolume],
    prior: PriorMap,
    transforms: TransformSet,
    omega: VolumeGrid | None = None,
) -> SampleState:
    if omega is None:
        omega = prior.grid
    if len(images) != transforms.n_images:
        raise ValueError("need one image transform per image")
    pts = omega.voxel_centers()
    image_ffd_points = [t.ffd.apply(pts) for t in transforms.image_transforms]
    image_points = [
        t.affine.apply(fp) for t, fp in zip(transforms.image_transforms, image_ffd_points)
    ]
    intensities = np.stack(
        [sample_trilinear(img, y) for img, y in zip(images, image_points)]
    )
    map_ffd_points = transforms.map_transform.ffd.apply(pts)
    map_points = transforms.map_transform.affine.apply(map_ffd_points)
    prior_values = np.stack(
        [sample_trilinear(prior.channel_volume(k), map_points) for k in range(prior.n_labels)]
    )
    return SampleState(
        omega, pts, intensities, prior_values, image_points, map_points,
        image_ffd_points, map_ffd_points,
    )


def update_state_slot(
    state: SampleState,
    images: list[ScalarVolume],
    prior: PriorMap,
    transforms: TransformSet,
    slot: int | str,
) -> SampleState:
    """Sample state after one transform changed; the other factors carry over.

    slot is an image index or "map".  Equivalent to sample_state on the new
    transform set, recomputing only the moved slot's samples.
    """
    if slot == "map":
        map_ffd = transforms.map_transform.ffd.apply(state.points)
        map_pts = transforms.map_transform.affine.apply(map_ffd)
        prior_values = np.stack(
            [sample_trilinear(prior.channel_volume(k), map_pts) for k in range(prior.n_labels)]
        )
        return SampleState(
            state.omega, state.points, state.intensities, prior_values,
            state.image_points, map_pts, state.image_ffd_points, map_ffd,
        )
    i = int(slot)
    ffd_pts = transforms.image_transforms[i].ffd.apply(state.points)
    y = transforms.image_transforms[i].affine.apply(ffd_pts)
    intensities = state.intensities.copy()
    intensities[i] = sample_trilinear(images[i], y)
    image_points = list(state.image_points)
    image_points[i] = y
    image_ffd_points = list(state.image_ffd_points)
    image_ffd_points[i] = ffd_pts
    return SampleState(
        state.omega, state.points, intensities, state.prior_values,
        image_points, state.map_points, image_ffd_points, state.map_ffd_points,
    )


@dataclass
class ModelContext:
    """Per-voxel factors of the likelihood for one (params, transforms) pair."""

    state: SampleState
    params: MvmmParams
    weighted_pdf: dict[tuple[int, int], np.ndarray]  # tau_c * pdf_c, shape (C, N)
    tissue_pdf: np.ndarray                           # (n_images, n_labels, N)
    prior_kx: np.ndarray                             # (n_labels, N), normalized
    nf: np.ndarray                                   # (N,) prior normalization factor
    tissue_joint: np.ndarray                         # (n_labels, N)  prod_i tissue_pdf
    lh: np.ndarray                                   # (N,) per-voxel likelihood
    ll: float


def model_context(params: MvmmParams, state: SampleState) -> ModelContext:
    config = params.config
    n_img, n_lab, n_vox = config.n_images, config.n_labels, state.points.shape[0]

    weighted_pdf = {}
    tissue_pdf = np.empty((n_img, n_lab, n_vox))
    for i in range(n_img):
        v = state.intensities[i]
        for k in range(n_lab):
            tau, mu, sigma = params.component_arrays(i, k)
            wp = tau[:, None] * gaussian_pdf(mu[:, None], sigma[:, None], v[None, :])
            weighted_pdf[i, k] = wp
            tissue_pdf[i, k] = wp.sum(axis=0)

    pi = params.label_proportions
    numer = state.prior_values * pi[:, None]
    nf = numer.sum(axis=0)
    # outside the prior support the map carries no information: fall back to
    # the global proportions (normalized)
    fallback = pi / pi.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        prior_kx = np.where(nf > 0.0, numer / np.where(nf > 0.0, nf, 1.0), fallback[:, None])

    tissue_joint = tissue_pdf.prod(axis=0)
    lh = (prior_kx * tissue_joint).sum(axis=0)
    ll = float(np.log(np.maximum(lh, LH_FLOOR)).sum())
    return ModelContext(state, params, weighted_pdf, tissue_pdf, prior_kx, nf, tissue_joint, lh, ll)


# ---------------------------------------------------------------------------
# Public per-point operations


def voxel_prior(params: MvmmParams, prior: PriorMap, fm: TransformStack, x) -> np.ndarray:
    """Normalized voxel-wise label prior at world point(s) x.

    Blends the prior map (sampled through the map transform) with the global
    label proportions; where the map has no support the global proportions
    are returned.  Invariant to a common rescaling of the proportions.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    single = np.asarray(x).ndim == 1
    y = fm.apply(pts)
    a = np.stack([sample_trilinear(prior.channel_volume(k), y) for k in range(prior.n_labels)])
    pi = params.label_proportions
    numer = a * pi[:, None]
    nf = numer.sum(axis=0)
    fallback = pi / pi.sum()
    out = np.where(nf > 0.0, numer / np.where(nf > 0.0, nf, 1.0), fallback[:, None])
    return out[:, 0] if single else out


def image_tissue_pdf(
    params: MvmmParams, images: list[ScalarVolume], transforms: TransformSet, x, k: int
) -> np.ndarray:
    """p(I_i | tissue k) for each image i at world point(s) x."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    single = np.asarray(x).ndim == 1
    out = np.empty((len(images), pts.shape[0]))
    for i, (img, t) in enumerate(zip(images, transforms.image_transforms)):
        v = sample_trilinear(img, t.apply(pts))
        tau, mu, sigma = params.component_arrays(i, k)
        out[i] = (tau[:, None] * gaussian_pdf(mu[:, None], sigma[:, None], np.atleast_1d(v)[None, :])).sum(axis=0)
    return out[:, 0] if single else out


def log_likelihood(
    params: MvmmParams,
    images: list[ScalarVolume],
    prior: PriorMap,
    transforms: TransformSet,
    omega: VolumeGrid | None = None,
) -> float:
    """Sum over common-space voxels of log of the per-voxel likelihood."""
    return model_context(params, sample_state(images, prior, transforms, omega)).ll


# ---------------------------------------------------------------------------
# EM sweeps


def e_step_from_context(ctx: ModelContext) -> PosteriorField:
    config = ctx.params.config
    numer = ctx.prior_kx * ctx.tissue_joint
    denom = numer.sum(axis=0)
    ok = denom > 0.0
    label_post = np.where(ok, numer / np.where(ok, denom, 1.0), ctx.prior_kx)

    component_post = {}
    for i in range(config.n_images):
        for k in range(config.n_labels):
            wp = ctx.weighted_pdf[i, k]
            pik = ctx.tissue_pdf[i, k]
            good = pik > 0.0
            tau = ctx.params.component_arrays(i, k)[0]
            # vanished tissue pdf: split the label posterior by the proportions
            frac = np.where(good, wp / np.where(good, pik, 1.0), tau[:, None])
            component_post[i, k] = label_post[k] * frac
    return PosteriorField(ctx.state.omega, label_post, component_post)


def e_step(
    params: MvmmParams,
    images: list[ScalarVolume],
    prior: PriorMap,
    transforms: TransformSet,
    omega: VolumeGrid | None = None,
) -> PosteriorField:
    """Posterior expectations of the label and component indicators."""
    return e_step_from_context(model_context(params, sample_state(images, prior, transforms, omega)))


def m_step_from_context(
    ctx: ModelContext,
    posteriors: PosteriorField,
    report: list[str] | None = None,
) -> MvmmParams:
    params = ctx.params
    config = params.config
    state = ctx.state
    n_vox = state.points.shape[0]

    new_components: dict[tuple[int, int], list[GaussianComponent]] = {}
    for i in range(config.n_images):
        v = state.intensities[i]
        floor = float(params.sigma_floors[i])
        for k in range(config.n_labels):
            post = posteriors.component_post[i, k]
            weight = post.sum(axis=1)
            total = weight.sum()
            old = params.components[i, k]
            comps = []
            for c in range(post.shape[0]):
                tau = float(weight[c] / total) if total > 0 else 1.0 / post.shape[0]
                if weight[c] < DEGENERATE_WEIGHT_FRAC * n_vox:
                    # the moment sums are 0/0 here; keeping the previous mode
                    # is the partial update that cannot lower the likelihood
                    comps.append(GaussianComponent(tau, old[c].mu, old[c].sigma))
                    if report is not None:
                        report.append(f"kept degenerate component {c} of image {i}, label {k}")
                    continue
                mu = float((post[c] * v).sum() / weight[c])
                var = float((post[c] * (v - mu) ** 2).sum() / weight[c])
                sigma = max(math.sqrt(max(var, 0.0)), floor)
                comps.append(GaussianComponent(tau, mu, sigma))
            new_components[i, k] = comps

    # label proportions: one minorize-maximize step, the prior normalization
    # factor linearized at the previous iterate.  Voxels without prior support
    # fall back to the proportions themselves, which is the same as giving
    # them unit support, so they add 1/sum(pi) to every denominator.
    a = state.prior_values
    cx = (a * params.label_proportions[:, None]).sum(axis=0)
    supported = cx > 0.0
    numer = posteriors.label_post.sum(axis=1)
    denom = (a[:, supported] / cx[supported]).sum(axis=1)
    denom = denom + float((~supported).sum()) / params.label_proportions.sum()
    pi_new = np.where(denom > 0.0, numer / np.where(denom > 0.0, denom, 1.0),
                      params.label_proportions)
    total = pi_new.sum()
    if total <= 0:
        pi_new = params.label_proportions.copy()
        total = pi_new.sum()
    pi_new = pi_new / total  # harmless by scale invariance of the voxel prior

    return MvmmParams(config, pi_new, new_components, params.sigma_floors.copy())


def m_step(
    posteriors: PosteriorField,
    images: list[ScalarVolume],
    prior: PriorMap,
    transforms: TransformSet,
    params: MvmmParams,
    omega: VolumeGrid | None = None,
    report: list[str] | None = None,
) -> MvmmParams:
    """Weighted maximum-likelihood update of all mixture parameters."""
    ctx = model_context(params, sample_state(images, prior, transforms, omega))
    return m_step_from_context(ctx, posteriors, report)


# ---------------------------------------------------------------------------
# Initialization and classification


def init_params(
    prior: PriorMap,
    images: list[ScalarVolume],
    config: TissueConfig,
    transforms: TransformSet | None = None,
    omega: VolumeGrid | None = None,
) -> MvmmParams:
    """Seed parameters from the prior map and the intensity spread.

    Voxels are assigned to their highest-prior label; each (image, tissue)
    mixture starts with means spread across the trimmed intensity range of
    its assigned voxels, endpoints included, so minority modes at either
    extreme of the range get a seed.  The label proportions start at the
    voxel-averaged prior mass.
    """
    if config.n_images != len(images):
        raise ValueError("config declares a different number of images")
    if omega is None:
        omega = prior.grid
    if transforms is None:
        transforms = TransformSet.identity_for_domain(omega, len(images))
    state = sample_state(images, prior, transforms, omega)

    assign = state.prior_values.argmax(axis=0)
    pi = state.prior_values.mean(axis=1)
    pi = pi / pi.sum()

    sigma_floors = np.empty(len(images))
    for i in range(len(images)):
        rng = float(state.intensities[i].max() - state.intensities[i].min())
        sigma_floors[i] = 1e-4 * rng if rng > 0 else 1e-4

    components: dict[tuple[int, int], list[GaussianComponent]] = {}
    for k in range(config.n_labels):
        mask = assign == k
        if not mask.any():
            raise ValueError(f"no voxels assigned to tissue {config.labels[k]!r} by the prior")
        for i in range(len(images)):
            vals = state.intensities[i][mask]
            c_ik = config.n_components(i, k)
            pooled = float(vals.std())
            sigma = max(pooled / c_ik, sigma_floors[i])
            lo, hi = np.percentile(vals, [2.0, 98.0])
            if hi <= lo:
                hi = lo + sigma
            if c_ik == 1:
                mus = np.array([0.5 * (lo + hi)])
            else:
                mus = lo + np.arange(c_ik) / (c_ik - 1) * (hi - lo)
            components[i, k] = [
                GaussianComponent(1.0 / c_ik, float(m), sigma) for m in mus
            ]
    return MvmmParams(config, pi, components, sigma_floors)


def classify(
    posteriors: PosteriorField,
    params: MvmmParams,
    scar_image: int = 0,
    wall_label: int | None = None,
) -> tuple[LabelVolume, LabelVolume]:
    """Argmax label map plus the enhanced-subtype (scar) map.

    A voxel is scar when its label is the wall and, in the scar-bearing
    image, its wall-component posterior peaks at the component with the
    highest mean.  Exact ties resolve to the lower label/component id.
    """
    config = params.config
    if wall_label is None:
        wall_label = config.labels.index("wall") if "wall" in config.labels else config.n_labels - 1
    labels = posteriors.label_post.argmax(axis=0)

    comp_post = posteriors.component_post[scar_image, wall_label]
    _, mu, _ = params.component_arrays(scar_image, wall_label)
    enhanced = int(np.argmax(mu))
    scar = (labels == wall_label) & (comp_post.argmax(axis=0) == enhanced)

    grid = posteriors.grid
    return LabelVolume(grid, labels.astype(np.int32)), LabelVolume(grid, scar.astype(np.int32))
