"""Estimator facades: sklearn parameter protocol and fit surface."""

import numpy as np
import pytest
from sklearn.base import clone

from scarseg import (
    GmmBaseline,
    MvmmSegmenter,
    OtsuBaseline,
    PriorMap,
    ScalarVolume,
    VolumeGrid,
)


def quick_segmenter(**kwargs):
    kwargs.setdefault("register", False)
    kwargs.setdefault("icm_blocks", 2)
    kwargs.setdefault("em_iters_per_block", 3)
    return MvmmSegmenter(**kwargs)


class TestParameterProtocol:
    def test_get_params_round_trip(self):
        est = MvmmSegmenter(icm_blocks=7, freeze=("map",), control_spacing=15.0)
        params = est.get_params()
        assert params["icm_blocks"] == 7
        assert params["freeze"] == ("map",)
        assert params["control_spacing"] == 15.0
        rebuilt = MvmmSegmenter(**params)
        assert rebuilt.get_params() == params

    def test_set_params(self):
        est = MvmmSegmenter()
        est.set_params(register=False, scar_image=1)
        assert est.register is False and est.scar_image == 1
        with pytest.raises(ValueError):
            est.set_params(not_a_param=3)

    def test_clone(self):
        for est in (quick_segmenter(), GmmBaseline(max_iters=5), OtsuBaseline(0.4)):
            copy = clone(est)
            assert copy is not est
            assert copy.get_params() == est.get_params()

    def test_baseline_params(self):
        assert GmmBaseline().get_params()["max_iters"] == 100
        assert OtsuBaseline().get_params()["wall_threshold"] == 0.5


class TestMvmmSegmenter:
    def test_fit_sets_state(self, tiny_phantom):
        ph = tiny_phantom
        est = quick_segmenter().fit(ph.images, ph.prior)
        n = ph.prior.grid.n_voxels
        assert est.labels_.shape == (n,)
        assert est.scar_.dtype == bool
        assert est.labels_.max() <= 1
        assert np.all(est.labels_[est.scar_] == 1)
        assert est.label_volume_.grid == ph.prior.grid
        assert isinstance(est.ll_, float)
        assert est.trace_[0]["phase"] == "init"
        assert isinstance(est.warnings_, list)
        assert est.params_.config.n_images == 2

    def test_register_false_freezes_transforms(self, tiny_phantom):
        ph = tiny_phantom
        est = quick_segmenter().fit(ph.images, ph.prior)
        for stack in est.transforms_.image_transforms + [est.transforms_.map_transform]:
            np.testing.assert_array_equal(stack.affine.matrix, np.eye(3))
            np.testing.assert_array_equal(stack.affine.translation, 0.0)
            assert not stack.ffd.displacements.any()

    def test_array_input_matches_volume_input(self, tiny_phantom):
        ph = tiny_phantom
        a = quick_segmenter().fit(ph.images, ph.prior)
        stacked = np.stack([img.as_array() for img in ph.images])
        b = quick_segmenter().fit(stacked, ph.prior)
        np.testing.assert_array_equal(a.labels_, b.labels_)
        np.testing.assert_array_equal(a.scar_, b.scar_)

    def test_fit_predict(self, tiny_phantom):
        ph = tiny_phantom
        est = quick_segmenter()
        labels = est.fit_predict(ph.images, ph.prior)
        np.testing.assert_array_equal(labels, est.labels_)

    def test_input_errors(self, tiny_phantom):
        ph = tiny_phantom
        with pytest.raises(ValueError):
            quick_segmenter().fit(ph.images[:1], ph.prior)  # config declares 2 images
        with pytest.raises(TypeError):
            quick_segmenter().fit(ph.images, "not a prior")
        far_grid = VolumeGrid((16, 16, 16), origin=(1000.0, 0.0, 0.0))
        far = ScalarVolume(far_grid, ph.images[0].values.copy())
        with pytest.raises(ValueError):
            quick_segmenter().fit([ph.images[0], far], ph.prior)


class TestGmmBaseline:
    def test_fit(self, tiny_phantom):
        ph = tiny_phantom
        est = GmmBaseline(max_iters=30).fit(ph.images[0], ph.prior)
        assert est.labels_.shape == (ph.prior.grid.n_voxels,)
        assert np.all(est.labels_[est.scar_] == 1)

    def test_rejects_multiple_images(self, tiny_phantom):
        ph = tiny_phantom
        with pytest.raises(ValueError):
            GmmBaseline().fit(ph.images, ph.prior)


class TestOtsuBaseline:
    def test_fit(self, tiny_phantom):
        ph = tiny_phantom
        est = OtsuBaseline().fit(ph.images[0], ph.prior)
        assert isinstance(est.threshold_, float)
        wall_mask = ph.prior.channels[1] >= 0.5
        np.testing.assert_array_equal(est.labels_ > 0, wall_mask)
        assert np.all(wall_mask[est.scar_])

    def test_wall_threshold_parameter(self, tiny_phantom):
        ph = tiny_phantom
        strict = OtsuBaseline(wall_threshold=0.9).fit(ph.images[0], ph.prior)
        loose = OtsuBaseline(wall_threshold=0.2).fit(ph.images[0], ph.prior)
        assert strict.labels_.sum() < loose.labels_.sum()
