"""Metrics: residual reports, MAE variants, Pearson, gauge alignment, and
the residual-vs-loss consistency invariant."""

import numpy as np
import pytest

from kinefuse import camera, evaluation, objective, sensors, so3, synth, tape

rng = np.random.default_rng(31)


class TestMae:
    def test_identical_series(self):
        a = rng.normal(size=20)
        assert evaluation.mae(a, a) == 0.0

    def test_constant_offset(self):
        a = rng.normal(size=20)
        assert np.isclose(evaluation.mae(a, a + 3.0), 3.0)

    def test_hand_example(self):
        assert np.isclose(evaluation.mae([1, 2, 3], [2, 3, 5]), 4.0 / 3.0)

    def test_length_mismatch(self):
        with pytest.raises(evaluation.EvaluationError):
            evaluation.mae([1, 2], [1, 2, 3])


class TestMaeMa:
    def test_bias_removed(self):
        a = rng.normal(size=30)
        assert evaluation.mae_ma(a, a + 7.3) < 1e-12

    def test_hand_example(self):
        assert np.isclose(evaluation.mae_ma([0.0, 10.0], [10.0, 0.0]), 10.0)

    def test_bias_only_difference_bounded_by_mae(self):
        a = rng.normal(size=25)
        b = a + 2.0
        assert evaluation.mae_ma(a, b) <= evaluation.mae(a, b)

    def test_shift_invariance(self):
        a, b = rng.normal(size=(2, 40))
        assert np.isclose(evaluation.mae_ma(a, b),
                          evaluation.mae_ma(a + 5.0, b - 11.0))


class TestPearson:
    def test_positive_affine(self):
        a = rng.normal(size=50)
        assert np.isclose(evaluation.pearson(a, 2 * a + 3), 1.0)

    def test_negation(self):
        a = rng.normal(size=50)
        assert np.isclose(evaluation.pearson(a, -a), -1.0)

    def test_independent_noise_near_zero(self):
        g = np.random.default_rng(0)
        a, b = g.normal(size=(2, 10_000))
        assert abs(evaluation.pearson(a, b)) < 0.05

    def test_zero_variance_reported_absent(self):
        assert evaluation.pearson(np.ones(10), rng.normal(size=10)) is None

    def test_affine_invariance(self):
        a, b = rng.normal(size=(2, 60))
        r1 = evaluation.pearson(a, b)
        r2 = evaluation.pearson(3.0 * a + 1.0, 0.5 * b - 4.0)
        assert np.isclose(r1, r2)


class TestSummary:
    def test_median_iqr(self):
        med, iqr = evaluation.median_iqr([1.0, 2.0, 3.0, 4.0, 100.0])
        assert med == 3.0
        assert iqr == 2.0

    def test_ignores_none(self):
        med, _ = evaluation.median_iqr([None, 5.0, None, 7.0])
        assert med == 6.0


@pytest.fixture(scope="module")
def truth_setup():
    cfg = synth.ScenarioConfig()
    rec = synth.build_recording(cfg)
    truth = synth.generate_trajectory(cfg, rec.tree())
    return cfg, rec, truth


class TestResiduals:
    def test_truth_model_residuals_vanish(self, truth_setup):
        cfg, rec, truth = truth_setup
        rep = evaluation.compute_residuals(truth, rec)
        assert rep.keypoint_cm < 1e-3
        assert rep.reproj_px < 1e-3
        assert rep.phone_gyro_deg_s < 1e-3
        assert rep.sensor_gyro_deg_s < 1e-3
        assert rep.attitude_deg < 1e-3

    def test_noise_doubles_keypoint_residual(self, truth_setup):
        cfg0, _, _ = truth_setup
        reps = []
        for sig in (10.0, 20.0):
            c = synth.ScenarioConfig(**{**cfg0.to_dict(),
                                        "keypoint_sigma_mm": sig})
            rec = synth.build_recording(c)
            truth = synth.generate_trajectory(c, rec.tree())
            reps.append(evaluation.compute_residuals(truth, rec).keypoint_cm)
        assert 1.7 < reps[1] / reps[0] < 2.3

    def test_matches_stripped_loss_residual(self, truth_setup):
        # 3D keypoint residual must equal the loss-term distances with Huber
        # and confidence weighting removed
        cfg, rec, truth = truth_setup
        c = synth.ScenarioConfig(**{**cfg.to_dict(), "keypoint_sigma_mm": 12.0})
        rec2 = synth.build_recording(c)
        truth2 = synth.generate_trajectory(c, rec2.tree())
        rep = evaluation.compute_residuals(truth2, rec2)
        frames = rec2.keypoints
        pm = truth2.markers(frames.t)
        cam = truth2.camera_rot(frames.t)
        a = camera.center_keypoints(
            np.einsum("nji,nmj->nmi", cam, pm), frames.conf)
        b = camera.center_keypoints(frames.p_cam, frames.conf)
        manual = np.mean(np.linalg.norm(a - b, axis=-1)[frames.conf > 0]) * 100
        assert abs(rep.keypoint_cm - manual) < 1e-9

    def test_report_dict_round_trip(self):
        rep = evaluation.ResidualReport(keypoint_cm=1.0, reproj_px=None,
                                        phone_gyro_deg_s=2.0,
                                        sensor_gyro_deg_s=None,
                                        attitude_deg=3.0)
        assert evaluation.ResidualReport.from_dict(rep.to_dict()) == rep


class TestComparison:
    def test_truth_against_itself(self, truth_setup):
        cfg, rec, truth = truth_setup
        ts = evaluation.eval_times(cfg.duration_s, cfg.eval_rate_hz)
        rep = evaluation.compare_to_truth(truth, truth, ["r_hip", "r_knee"], ts)
        for j in rep.joints:
            assert j.mae_deg == 0.0
            assert j.mae_ma_deg == 0.0
            assert np.isclose(j.pearson, 1.0)

    def test_gauge_rotation_recovers_injected_rotation(self, truth_setup):
        cfg, rec, truth = truth_setup
        ts = evaluation.eval_times(cfg.duration_s, 10.0)
        q = so3.quat_to_matrix(so3.random_quaternion(rng))

        class Rotated:
            def camera_rot(self, t, with_rate=False):
                return q @ truth.camera_rot(t)

        est = evaluation.gauge_rotation(Rotated(), truth, ts)
        assert np.abs(est - q).max() < 1e-9

    def test_attitude_map_error_zero_for_truth(self, truth_setup):
        cfg, rec, truth = truth_setup
        ts = evaluation.eval_times(cfg.duration_s, 10.0)
        err = evaluation.attitude_map_error(truth, truth, rec, ts)
        assert err < 1e-6

    def test_default_joints_from_sensor_side(self, truth_setup):
        cfg, _, _ = truth_setup
        assert evaluation.default_joints(cfg) == ["r_hip", "r_knee"]

    def test_paired_delta(self):
        a = evaluation.ComparisonReport(
            mode="fusion",
            joints=[evaluation.JointComparison("r_knee", 2.0, 1.0, 0.99)],
            n_times=10)
        b = evaluation.ComparisonReport(
            mode="video",
            joints=[evaluation.JointComparison("r_knee", 3.0, 2.5, 0.90)],
            n_times=10)
        d = evaluation.paired_delta(a, b)
        assert np.isclose(d["r_knee"]["mae_ma_deg"], -1.5)
        assert np.isclose(d["r_knee"]["pearson"], 0.09)


class TestReportFiles:
    def test_csv_layout(self, tmp_path):
        rep = evaluation.ComparisonReport(
            mode="fusion",
            joints=[evaluation.JointComparison("r_hip", 1.0, 0.5, 0.9),
                    evaluation.JointComparison("r_knee", 2.0, 1.5, None)],
            n_times=5, scenario_hash="ff00")
        path = tmp_path / "report.csv"
        evaluation.write_comparison_csv(path, [rep])
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("scenario_hash,mode,joint")
        assert "r_knee" in lines[2] and lines[2].endswith(",,5")
