"""Transform optimization for the joint segmentation model.

Analytic gradients of the log-likelihood with respect to each image
transform and the prior-map transform, a safeguarded gradient-ascent step,
and the iterated-conditional-modes driver that alternates EM sweeps over
the mixture parameters with ascent steps on one transform group at a time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import ScalarVolume, VolumeGrid, sample_gradient, sample_trilinear
from .mixture import (
    LH_FLOOR,
    ModelContext,
    MvmmParams,
    PosteriorField,
    SampleState,
    e_step_from_context,
    gaussian_pdf,
    gaussian_pdf_dv,
    m_step_from_context,
    model_context,
    sample_state,
    update_state_slot,
)
from .priors import PriorMap
from .transforms import TransformSet, TransformStack

MAX_HALVINGS = 10


@dataclass(frozen=True)
class OptimizerConfig:
    """Schedule and step sizes for the alternating optimization."""

    em_iters_per_block: int = 5
    transform_steps_per_block: int = 3
    icm_blocks: int = 20
    step_size_affine: float = 0.5
    step_size_ffd: float = 1.0
    ll_rel_tol: float = 1e-6
    grad_norm_tol: float = 1e-8
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        if min(self.em_iters_per_block, self.transform_steps_per_block, self.icm_blocks) < 1:
            raise ValueError("iteration counts must be >= 1")
        if min(self.step_size_affine, self.step_size_ffd, self.ll_rel_tol, self.grad_norm_tol) <= 0:
            raise ValueError("step sizes and tolerances must be positive")
        known = {"map"} | {f"image_{i}" for i in range(16)}
        for name in self.freeze:
            if name not in known:
                raise ValueError(f"unknown transform group {name!r}")


# ---------------------------------------------------------------------------
# Gradient assembly


def _assemble_gradient(stack: TransformStack, points: np.ndarray,
                       ffd_points: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain per-voxel spatial gradients g = dLL/dy into the parameter vector.

    y = M (D(x) - c) + c + t, so the matrix entries see the pre-affine points
    and the FFD controls see g mapped through M and the B-spline weights.
    """
    rel = ffd_points - stack.affine.center
    grad_matrix = g.T @ rel
    grad_translation = g.sum(axis=0)
    h = g @ stack.affine.matrix
    n_control = stack.ffd.n_control
    grad_ffd = np.zeros((n_control, 3))
    for flat, inside, w in stack.ffd.support_terms(points):
        if not inside.any():
            continue
        idx = flat[inside]
        for a in range(3):
            grad_ffd[:, a] += np.bincount(idx, weights=(w * h[:, a])[inside], minlength=n_control)
    return np.concatenate([grad_matrix.ravel(), grad_translation, grad_ffd.ravel()])


def grad_image_transform(
    params: MvmmParams,
    images: list[ScalarVolume],
    prior: PriorMap,
    transforms: TransformSet,
    i: int,
    omega: VolumeGrid | None = None,
    ctx: ModelContext | None = None,
) -> np.ndarray:
    """dLL / d(parameters of the transform of image i).

    Per voxel the likelihood depends on image i only through the sampled
    intensity, so the spatial gradient is the posterior-style weight times
    the image gradient at the mapped point.
    """
    if ctx is None:
        ctx = model_context(params, sample_state(images, prior, transforms, omega))
    state = ctx.state
    config = params.config
    n_lab = config.n_labels
    v = state.intensities[i]

    # Pi_{j != i} p(I_j | k), per label
    others = [ctx.tissue_pdf[j] for j in range(config.n_images) if j != i]
    other_joint = np.prod(np.stack(others), axis=0) if others else np.ones((n_lab, v.shape[0]))

    valid = ctx.lh > LH_FLOOR
    inv_lh = np.where(valid, 1.0 / np.where(valid, ctx.lh, 1.0), 0.0)
    w = np.zeros_like(v)
    for k in range(n_lab):
        tau, mu, sigma = params.component_arrays(i, k)
        dsum = (tau[:, None] * gaussian_pdf_dv(mu[:, None], sigma[:, None], v[None, :])).sum(axis=0)
        w += ctx.prior_kx[k] * other_joint[k] * dsum
    w *= inv_lh

    g = w[:, None] * sample_gradient(images[i], state.image_points[i])
    return _assemble_gradient(
        transforms.image_transforms[i], state.points, state.image_ffd_points[i], g
    )


def grad_map_transform(
    params: MvmmParams,
    images: list[ScalarVolume],
    prior: PriorMap,
    transforms: TransformSet,
    omega: VolumeGrid | None = None,
    ctx: ModelContext | None = None,
) -> np.ndarray:
    """dLL / d(parameters of the prior-map transform).

    Differentiates the normalized voxel prior exactly: with a_k the sampled
    prior channel and nf = sum_l a_l pi_l,

        d(pi_kx)/dy = (pi_k / nf) grad a_k - (a_k pi_k / nf^2) sum_l pi_l grad a_l

    which after summing against the tissue factors simplifies to
    g = sum_k f_k pi_k grad a_k / (LH nf) - sum_l pi_l grad a_l / nf.
    """
    if ctx is None:
        ctx = model_context(params, sample_state(images, prior, transforms, omega))
    state = ctx.state
    pi = params.label_proportions
    n_lab = params.config.n_labels

    grad_a = np.stack(
        [sample_gradient(prior.channel_volume(k), state.map_points) for k in range(n_lab)]
    )  # (K, N, 3)

    valid = (ctx.nf > 0.0) & (ctx.lh > LH_FLOOR)
    inv_nf = np.where(valid, 1.0 / np.where(valid, ctx.nf, 1.0), 0.0)
    inv_lh = np.where(valid, 1.0 / np.where(valid, ctx.lh, 1.0), 0.0)

    term1 = np.einsum("kn,k,kna->na", ctx.tissue_joint, pi, grad_a)
    s_vec = np.einsum("k,kna->na", pi, grad_a)
    g = term1 * (inv_lh * inv_nf)[:, None] - s_vec * inv_nf[:, None]
    return _assemble_gradient(
        transforms.map_transform, state.points, state.map_ffd_points, g
    )


# ---------------------------------------------------------------------------
# Slot-wise log-likelihood evaluation (only the moved factor is recomputed)


class _SlotObjective:
    """LL as a function of one transform stack, all other factors cached."""

    def __init__(self, params: MvmmParams, images: list[ScalarVolume], prior: PriorMap,
                 slot, ctx: ModelContext):
        self.params = params
        self.images = images
        self.prior = prior
        self.slot = slot
        self.points = ctx.state.points
        if slot == "map":
            self.tissue_joint = ctx.tissue_joint
        else:
            others = [ctx.tissue_pdf[j] for j in range(params.config.n_images) if j != slot]
            self.fixed = ctx.prior_kx * (
                np.prod(np.stack(others), axis=0) if others else 1.0
            )

    def __call__(self, stack: TransformStack) -> float:
        pi = self.params.label_proportions
        n_lab = self.params.config.n_labels
        if self.slot == "map":
            y = stack.apply(self.points)
            a = np.stack(
                [sample_trilinear(self.prior.channel_volume(k), y) for k in range(n_lab)]
            )
            numer = a * pi[:, None]
            nf = numer.sum(axis=0)
            fallback = pi / pi.sum()
            ok = nf > 0.0
            prior_kx = np.where(ok, numer / np.where(ok, nf, 1.0), fallback[:, None])
            lh = (prior_kx * self.tissue_joint).sum(axis=0)
        else:
            i = self.slot
            v = sample_trilinear(self.images[i], stack.apply(self.points))
            lh = np.zeros(self.points.shape[0])
            for k in range(n_lab):
                tau, mu, sigma = self.params.component_arrays(i, k)
                pik = (tau[:, None] * gaussian_pdf(mu[:, None], sigma[:, None], v[None, :])).sum(axis=0)
                lh += self.fixed[k] * pik
        return float(np.log(np.maximum(lh, LH_FLOOR)).sum())


# ---------------------------------------------------------------------------
# Safeguarded ascent


@dataclass
class AscentResult:
    transform: TransformStack
    ll: float
    stepped: bool
    halvings: int


def ascend(transform: TransformStack, gradient, config: OptimizerConfig,
           evaluate, base_ll: float | None = None,
           affine_scale: float = 1.0) -> AscentResult:
    """One monotone gradient-ascent step on a transform stack.

    The ascent direction is the gradient normalized per block (affine, FFD)
    by its largest entry, so the step sizes bound the per-parameter change.
    Matrix entries are unitless while translations and FFD displacements are
    in mm, so the matrix block is preconditioned by `affine_scale` (the
    domain half-width in mm): a step then moves any domain point by at most
    about step_size_affine mm regardless of which affine entry carries it.
    The step is halved up to 10 times while the log-likelihood, computed by
    the `evaluate` callable, does not improve; if it never improves the
    original transform is returned with stepped=False.
    """
    grad = np.asarray(gradient, dtype=np.float64)
    if grad.shape != (transform.n_parameters,):
        raise ValueError("gradient length does not match the transform parameter count")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient must be finite")
    if affine_scale <= 0:
        raise ValueError("affine_scale must be positive")
    if base_ll is None:
        base_ll = evaluate(transform)

    # gradient in scaled coordinates (matrix entries carry affine_scale mm
    # of displacement per unit), normalized there, then mapped back
    scaled = grad.copy()
    scaled[:9] /= affine_scale
    delta = np.zeros_like(grad)
    norm_aff = float(np.max(np.abs(scaled[:12])))
    norm_ffd = float(np.max(np.abs(scaled[12:]))) if grad.size > 12 else 0.0
    if norm_aff > 0:
        delta[:12] = config.step_size_affine * scaled[:12] / norm_aff
        delta[:9] /= affine_scale
    if norm_ffd > 0:
        delta[12:] = config.step_size_ffd * scaled[12:] / norm_ffd
    if not delta.any():
        return AscentResult(transform, base_ll, False, 0)

    base = transform.parameters()
    scale = 1.0
    for halvings in range(MAX_HALVINGS + 1):
        try:
            candidate = transform.with_parameters(base + scale * delta)
        except ValueError:
            scale *= 0.5
            continue
        ll = evaluate(candidate)
        if ll > base_ll:
            return AscentResult(candidate, ll, True, halvings)
        scale *= 0.5
    return AscentResult(transform, base_ll, False, MAX_HALVINGS)


# ---------------------------------------------------------------------------
# ICM driver


@dataclass
class IcmResult:
    params: MvmmParams
    transforms: TransformSet
    posteriors: PosteriorField
    trace: list[dict]
    warnings: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter((self.params, self.transforms, self.posteriors, self.trace))


def _replace_slot(transforms: TransformSet, slot, stack: TransformStack) -> TransformSet:
    if slot == "map":
        return TransformSet(list(transforms.image_transforms), stack)
    stacks = list(transforms.image_transforms)
    stacks[slot] = stack
    return TransformSet(stacks, transforms.map_transform)


def icm_fit(
    images: list[ScalarVolume],
    prior: PriorMap,
    params: MvmmParams,
    transforms: TransformSet,
    config: OptimizerConfig | None = None,
    omega: VolumeGrid | None = None,
) -> IcmResult:
    """Alternate EM sweeps and per-group transform ascent until converged.

    Each block runs em_iters_per_block EM cycles with the transforms frozen,
    then transform_steps_per_block safeguarded ascent steps on every image
    transform and finally the map transform, parameters frozen.  Stops early
    when a full block improves the log-likelihood by less than ll_rel_tol in
    relative terms.  The trace records the log-likelihood after every phase
    iteration and is non-decreasing throughout.
    """
    if config is None:
        config = OptimizerConfig()
    notes: list[str] = []
    domain = omega if omega is not None else prior.grid
    lo, hi = domain.world_bounds()
    affine_scale = max(float(np.max((hi - lo) / 2.0)), 1.0)
    state = sample_state(images, prior, transforms, omega)
    ctx = model_context(params, state)
    ll = ctx.ll
    trace: list[dict] = [{"phase": "init", "block": 0, "iteration": 0, "ll": ll}]

    groups: list = [f"image_{i}" for i in range(len(images))] + ["map"]
    for block in range(config.icm_blocks):
        block_start = ll

        for j in range(config.em_iters_per_block):
            posteriors = e_step_from_context(ctx)
            params = m_step_from_context(ctx, posteriors, notes)
            ctx = model_context(params, state)
            ll = ctx.ll
            trace.append({"phase": "em", "block": block, "iteration": j, "ll": ll})

        for name in groups:
            if name in config.freeze:
                continue
            slot = "map" if name == "map" else int(name.split("_")[1])
            for j in range(config.transform_steps_per_block):
                if slot == "map":
                    grad = grad_map_transform(params, images, prior, transforms, ctx=ctx)
                    stack = transforms.map_transform
                else:
                    grad = grad_image_transform(params, images, prior, transforms, slot, ctx=ctx)
                    stack = transforms.image_transforms[slot]
                grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
                if grad_norm <= config.grad_norm_tol:
                    trace.append({"phase": name, "block": block, "iteration": j,
                                  "ll": ll, "grad_norm": grad_norm, "stepped": False})
                    break
                objective = _SlotObjective(params, images, prior, slot, ctx)
                result = ascend(stack, grad, config, objective, base_ll=ll,
                                affine_scale=affine_scale)
                trace.append({"phase": name, "block": block, "iteration": j,
                              "ll": result.ll, "grad_norm": grad_norm,
                              "stepped": result.stepped})
                if not result.stepped:
                    msg = f"ascent on {name} made no progress at block {block}"
                    notes.append(msg)
                    warnings.warn(msg, RuntimeWarning, stacklevel=2)
                    break
                transforms = _replace_slot(transforms, slot, result.transform)
                state = update_state_slot(state, images, prior, transforms, slot)
                ctx = model_context(params, state)
                ll = ctx.ll

        if ll - block_start < config.ll_rel_tol * max(abs(block_start), 1.0):
            break

    posteriors = e_step_from_context(ctx)
    return IcmResult(params, transforms, posteriors, trace, notes)
