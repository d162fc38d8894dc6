"""Estimator front end: parameter protocol, fit/predict surface."""

import numpy as np
import pytest

from kinefuse import synth
from kinefuse.estimator import KinematicFusion, NotFittedError


@pytest.fixture(scope="module")
def small_fit():
    cfg = synth.ScenarioConfig(duration_s=3.0)
    for s in cfg.sensors:
        s["delta_s"] = 0.0
    rec = synth.build_recording(cfg)
    est = KinematicFusion(mode="fusion", steps=30, batch_size=40, seed=1,
                          calib_activation_step=10, anneal_start=10,
                          anneal_end=20, hidden_layers=1, hidden_width=16)
    est.fit(rec)
    return cfg, rec, est


class TestParamProtocol:
    def test_get_params_round_trip(self):
        est = KinematicFusion(steps=123, seed=9)
        params = est.get_params()
        assert params["steps"] == 123
        clone = KinematicFusion(**params)
        assert clone.get_params() == params

    def test_set_params_chains(self):
        est = KinematicFusion()
        out = est.set_params(steps=77, mode="video")
        assert out is est
        assert est.steps == 77 and est.mode == "video"

    def test_set_params_rejects_unknown(self):
        with pytest.raises(ValueError, match="invalid parameter"):
            KinematicFusion().set_params(stepz=10)


class TestFitPredict:
    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            KinematicFusion().predict([0.0])

    def test_fit_sets_state(self, small_fit):
        cfg, rec, est = small_fit
        assert est.result_.steps == 30
        assert est.duration_ == 3.0
        assert est.model_ is not None

    def test_predict_shapes(self, small_fit):
        cfg, rec, est = small_fit
        ts = np.linspace(0, 3, 7)
        theta = est.predict(ts)
        assert theta.shape == (7, est.tree_.n_dofs)
        angles = est.predict_joint_angles(ts, ["r_knee", "r_hip"])
        assert angles.shape == (7, 2)
        markers = est.predict_markers(ts)
        assert markers.shape == (7, est.tree_.n_markers, 3)
        cams = est.predict_camera(ts)
        assert cams.shape == (7, 3, 3)
        assert np.abs(np.swapaxes(cams, -1, -2) @ cams - np.eye(3)).max() < 1e-9

    def test_nonfinite_times_rejected(self, small_fit):
        _, _, est = small_fit
        with pytest.raises(ValueError):
            est.predict([np.inf])

    def test_score_is_negative_residual(self, small_fit):
        cfg, rec, est = small_fit
        s = est.score()
        assert s == -est.result_.residuals.keypoint_cm / 100.0
        assert np.isclose(est.score(rec), s)

    def test_video_mode(self):
        cfg = synth.ScenarioConfig(duration_s=2.0)
        rec = synth.build_recording(cfg)
        est = KinematicFusion(mode="video", steps=10, batch_size=30,
                              calib_activation_step=5, anneal_start=5,
                              anneal_end=8, hidden_layers=1, hidden_width=16)
        est.fit(rec)
        assert est.result_.mode == "video"
