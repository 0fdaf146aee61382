"""Estimator facades over the functional pipeline.

Thin scikit-learn style wrappers: hyperparameters in __init__ verbatim (so
get_params/set_params work), all computation in fit, fitted state in
trailing-underscore attributes.  X is the image data (one or more volumes),
the prior map plays the role of the supervision argument.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .mixture import TissueConfig, classify, init_params
from .registration import OptimizerConfig, icm_fit
from .surface import gmm_baseline, otsu_scar_map
from .transforms import TransformSet
from .validation import as_image_list, check_compatible, check_prior


class MvmmSegmenter(BaseEstimator):
    """Joint segmentation of co-registered volumes with embedded registration.

    fit(X, prior) expects X as a list of volumes (or a 4-D array) and a
    PriorMap; afterwards labels_ and scar_ hold flat per-voxel results on
    the prior grid.
    """

    def __init__(self, components=((2, 2), (2, 1)), labels=("background", "wall"),
                 em_iters_per_block=5, transform_steps_per_block=3, icm_blocks=20,
                 step_size_affine=0.5, step_size_ffd=1.0, ll_rel_tol=1e-6,
                 grad_norm_tol=1e-8, freeze=(), register=True, scar_image=0,
                 control_spacing=10.0):
        self.components = components
        self.labels = labels
        self.em_iters_per_block = em_iters_per_block
        self.transform_steps_per_block = transform_steps_per_block
        self.icm_blocks = icm_blocks
        self.step_size_affine = step_size_affine
        self.step_size_ffd = step_size_ffd
        self.ll_rel_tol = ll_rel_tol
        self.grad_norm_tol = grad_norm_tol
        self.freeze = freeze
        self.register = register
        self.scar_image = scar_image
        self.control_spacing = control_spacing

    def _config(self, n_images: int) -> OptimizerConfig:
        freeze = tuple(self.freeze)
        if not self.register:
            freeze = tuple(f"image_{i}" for i in range(n_images)) + ("map",)
        return OptimizerConfig(
            em_iters_per_block=self.em_iters_per_block,
            transform_steps_per_block=self.transform_steps_per_block,
            icm_blocks=self.icm_blocks,
            step_size_affine=self.step_size_affine,
            step_size_ffd=self.step_size_ffd,
            ll_rel_tol=self.ll_rel_tol,
            grad_norm_tol=self.grad_norm_tol,
            freeze=freeze,
        )

    def fit(self, X, prior, transforms: TransformSet | None = None):
        prior = check_prior(prior)
        images = as_image_list(X, prior.grid)
        check_compatible(images, prior)
        config = TissueConfig(tuple(self.labels), tuple(tuple(c) for c in self.components))
        if config.n_images != len(images):
            raise ValueError(
                f"components declare {config.n_images} images, got {len(images)}"
            )
        if transforms is None:
            transforms = TransformSet.identity_for_domain(
                prior.grid, len(images), self.control_spacing
            )
        params = init_params(prior, images, config, transforms)
        result = icm_fit(images, prior, params, transforms, self._config(len(images)))
        label_map, scar_map = classify(result.posteriors, result.params,
                                       scar_image=self.scar_image)
        self.params_ = result.params
        self.transforms_ = result.transforms
        self.posteriors_ = result.posteriors
        self.trace_ = result.trace
        self.warnings_ = result.warnings
        self.ll_ = result.trace[-1]["ll"]
        self.label_volume_ = label_map
        self.scar_volume_ = scar_map
        self.labels_ = label_map.labels.copy()
        self.scar_ = scar_map.labels.astype(bool)
        return self

    def fit_predict(self, X, prior, transforms: TransformSet | None = None) -> np.ndarray:
        return self.fit(X, prior, transforms).labels_


class GmmBaseline(BaseEstimator):
    """Single-image mixture with the same prior, transforms fixed at identity."""

    def __init__(self, components=((2, 2),), labels=("background", "wall"),
                 max_iters=100, rel_tol=1e-7):
        self.components = components
        self.labels = labels
        self.max_iters = max_iters
        self.rel_tol = rel_tol

    def fit(self, X, prior):
        prior = check_prior(prior)
        images = as_image_list(X, prior.grid)
        if len(images) != 1:
            raise ValueError("the GMM baseline takes exactly one image")
        check_compatible(images, prior)
        config = TissueConfig(tuple(self.labels), tuple(tuple(c) for c in self.components))
        label_map, scar_map = gmm_baseline(images[0], prior, config,
                                           max_iters=self.max_iters, rel_tol=self.rel_tol)
        self.label_volume_ = label_map
        self.scar_volume_ = scar_map
        self.labels_ = label_map.labels.copy()
        self.scar_ = scar_map.labels.astype(bool)
        return self

    def fit_predict(self, X, prior) -> np.ndarray:
        return self.fit(X, prior).labels_


class OtsuBaseline(BaseEstimator):
    """Threshold baseline: wall mask from the prior, scar above the threshold."""

    def __init__(self, wall_threshold=0.5):
        self.wall_threshold = wall_threshold

    def fit(self, X, prior):
        prior = check_prior(prior)
        images = as_image_list(X, prior.grid)
        if len(images) != 1:
            raise ValueError("the threshold baseline takes exactly one image")
        check_compatible(images, prior)
        label_map, scar_map, threshold = otsu_scar_map(
            images[0], prior, wall_threshold=self.wall_threshold
        )
        self.threshold_ = threshold
        self.label_volume_ = label_map
        self.scar_volume_ = scar_map
        self.labels_ = label_map.labels.copy()
        self.scar_ = scar_map.labels.astype(bool)
        return self

    def fit_predict(self, X, prior) -> np.ndarray:
        return self.fit(X, prior).labels_
