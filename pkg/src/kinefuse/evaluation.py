"""Residual diagnostics and ground-truth comparison metrics.

Residuals measure self-consistency: the fitted model against the recording's
own observations, averaged over each stream's own timestamps. Comparison
metrics measure accuracy against a reference trajectory (here the synthetic
ground truth): per-joint MAE, mean-adjusted MAE (waveform error with the
constant bias removed), and Pearson correlation, evaluated by querying the
continuous trajectory at the reference timestamps.

A monocular fusion fit lives in its own global frame: all observation
losses are invariant under one rigid rotation of the world, so comparisons
of orientations against ground truth first estimate that gauge rotation
(chordal mean over the camera trajectory) and remove it. Joint angles need
no such alignment.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import body, camera, objective, sensors, so3


class EvaluationError(ValueError):
    """Invalid metric input."""


# -- residuals ----------------------------------------------------------------


@dataclass
class ResidualReport:
    keypoint_cm: float | None = None
    reproj_px: float | None = None
    phone_gyro_deg_s: float | None = None
    sensor_gyro_deg_s: float | None = None
    attitude_deg: float | None = None

    def to_dict(self) -> dict:
        return {
            "keypoint_cm": self.keypoint_cm,
            "reproj_px": self.reproj_px,
            "phone_gyro_deg_s": self.phone_gyro_deg_s,
            "sensor_gyro_deg_s": self.sensor_gyro_deg_s,
            "attitude_deg": self.attitude_deg,
        }

    @classmethod
    def from_dict(cls, d) -> "ResidualReport":
        return cls(**d)


def compute_residuals(model: objective.KinematicModel, rec) -> ResidualReport:
    """Evaluate the model at every observation timestamp of each stream and
    average the raw (un-Hubered, unweighted) residuals."""
    report = ResidualReport()
    frames = rec.keypoints
    if frames is not None and frames.n_frames:
        pm = model.markers(frames.t)
        cam = model.camera_rot(frames.t)
        p_model_cam = np.einsum("nji,nmj->nmi", cam, pm)
        a = camera.center_keypoints(p_model_cam, frames.conf)
        b = camera.center_keypoints(frames.p_cam, frames.conf)
        dist = np.linalg.norm(a - b, axis=-1)
        used = frames.conf > 0
        if np.any(used):
            report.keypoint_cm = float(np.mean(dist[used]) * 100.0)
        z = p_model_cam[..., 2]
        valid = used & (z > camera.MIN_DEPTH)
        if np.any(valid):
            intr = rec.intrinsics
            px = np.stack(
                [intr.fx * p_model_cam[..., 0] / z + intr.cx,
                 intr.fy * p_model_cam[..., 1] / z + intr.cy], axis=-1)
            perr = np.linalg.norm(px - frames.x2d, axis=-1)
            report.reproj_px = float(np.mean(perr[valid]))

    if rec.phone is not None and rec.phone.t.size:
        t = sensors.resolve_time(rec.phone.t, model.calibration.phone_delta)
        cam, camd = model.camera_rot(t, with_rate=True)
        pred = sensors.predicted_phone_gyro(cam, camd)
        diff = np.linalg.norm(pred - rec.phone.w, axis=-1)
        report.phone_gyro_deg_s = float(np.degrees(np.mean(diff)))

    if rec.sensor_streams:
        gyro_errs = []
        att_errs = []
        cal = model.calibration
        for s in rec.sensor_streams:
            if s.sensor_id not in cal.sensor_ids:
                # a video-only fit carries no calibration for this stream
                continue
            i = cal.index(s.sensor_id)
            seg = model.tree.segment_index(s.segment)
            rsb = so3.quat_to_matrix(cal.rsb[i])
            if s.gyro_t.size:
                t = sensors.resolve_time(s.gyro_t, cal.imu_delta[i])
                rot, rotd = model.segment_rotations(t, with_rate=True)
                pred = sensors.predicted_sensor_gyro(rsb, rot[:, seg], rotd[:, seg])
                gyro_errs.append(
                    float(np.mean(np.linalg.norm(pred - s.gyro_w, axis=-1))))
            if s.att_t.size:
                t = sensors.resolve_time(s.att_t, cal.imu_delta[i])
                rot = model.segment_rotations(t)
                pred = model.predicted_attitude_for(s.sensor_id, s.att_matrices(),
                                                    s.att_t)
                ang = so3.geodesic_angle(rot[:, seg], pred)
                att_errs.append(float(np.mean(ang)))
        if gyro_errs:
            report.sensor_gyro_deg_s = float(np.degrees(np.mean(gyro_errs)))
        if att_errs:
            report.attitude_deg = float(np.degrees(np.mean(att_errs)))
    return report


# -- angle-series metrics -------------------------------------------------------


def _check_series(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise EvaluationError("series must be 1-D, non-empty, equal length")
    return a, b


def mae(a, b) -> float:
    """Mean absolute error between angle series (deg)."""
    a, b = _check_series(a, b)
    return float(np.mean(np.abs(a - b)))


def mae_ma(a, b) -> float:
    """MAE after removing each trace's mean: waveform error without bias."""
    a, b = _check_series(a, b)
    return mae(a - a.mean(), b - b.mean())


def pearson(a, b) -> float | None:
    """Sample correlation; None when either series has no variance."""
    a, b = _check_series(a, b)
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


# -- ground-truth comparison ----------------------------------------------------


@dataclass
class JointComparison:
    joint: str
    mae_deg: float
    mae_ma_deg: float
    pearson: float | None

    def to_dict(self):
        return {"joint": self.joint, "mae_deg": self.mae_deg,
                "mae_ma_deg": self.mae_ma_deg, "pearson": self.pearson}


@dataclass
class ComparisonReport:
    mode: str
    joints: list                    # of JointComparison
    n_times: int
    scenario_hash: str | None = None
    attitude_map_deg: float | None = None

    def joint_metric(self, joint, name):
        for j in self.joints:
            if j.joint == joint:
                return getattr(j, name)
        raise EvaluationError(f"joint {joint!r} not in report")

    def to_dict(self):
        return {
            "mode": self.mode,
            "n_times": self.n_times,
            "scenario_hash": self.scenario_hash,
            "attitude_map_deg": self.attitude_map_deg,
            "joints": [j.to_dict() for j in self.joints],
        }


def eval_times(duration, rate_hz=30.0) -> np.ndarray:
    n = int(round(duration * rate_hz))
    return np.arange(n) / rate_hz


def compare_to_truth(model, truth, joints, ts, mode="fusion",
                     scenario_hash=None) -> ComparisonReport:
    """Per-joint metrics of a fitted model against the reference trajectory,
    both evaluated directly at the reference timestamps."""
    a = model.joint_angles(ts, joints)
    b = truth.joint_angles(ts, joints)
    rows = []
    for k, name in enumerate(joints):
        rows.append(JointComparison(
            joint=name,
            mae_deg=mae(a[:, k], b[:, k]),
            mae_ma_deg=mae_ma(a[:, k], b[:, k]),
            pearson=pearson(a[:, k], b[:, k]),
        ))
    return ComparisonReport(mode=mode, joints=rows, n_times=len(ts),
                            scenario_hash=scenario_hash)


def gauge_rotation(model, truth, ts) -> np.ndarray:
    """Best single world rotation aligning the fit frame to the truth frame:
    the chordal mean of the relative camera orientations over ``ts``."""
    rf = model.camera_rot(ts)
    rt = truth.camera_rot(ts)
    m = np.einsum("nij,nkj->ik", rf, rt)   # sum of R_fit R_true^T
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def attitude_map_error(model, truth, rec, ts_align) -> float | None:
    """Mean geodesic angle (deg) between the fitted composite attitude map
    (drift @ reading @ alignment) and the true segment orientation, after
    removing the global gauge. This is the calibration-accuracy metric: the
    map is identifiable even though its factors are not."""
    if not rec.sensor_streams:
        return None
    known = set(model.calibration.sensor_ids)
    q = gauge_rotation(model, truth, ts_align)
    errs = []
    true_cal = truth.calibration
    for s in rec.sensor_streams:
        if not s.att_t.size or s.sensor_id not in known:
            continue
        pred = model.predicted_attitude_for(s.sensor_id, s.att_matrices(), s.att_t)
        i = true_cal.index(s.sensor_id)
        t_true = sensors.resolve_time(s.att_t, true_cal.imu_delta[i])
        seg = truth.tree.segment_index(s.segment)
        r_true = truth.segment_rotations(t_true)[:, seg]
        errs.append(float(np.mean(so3.geodesic_angle(pred, q @ r_true))))
    if not errs:
        return None
    return float(np.degrees(np.mean(errs)))


# -- occlusion experiment --------------------------------------------------------


def run_occlusion_experiment(scenario, fit_config, weights, joints=None,
                             progress=None) -> dict:
    """Fit video-only and fusion on one occluded synthetic recording and
    report both against the analytic ground truth."""
    from . import synth  # local import: synth builds on objective/evaluation

    if scenario.occlusion is None:
        raise EvaluationError("scenario defines no occlusion window")
    rec = synth.build_recording(scenario)
    tree = rec.tree()
    truth = synth.generate_trajectory(scenario, tree)
    if joints is None:
        joints = default_joints(scenario)
    ts = eval_times(scenario.duration_s, scenario.eval_rate_hz)
    out = {}
    for mode in ("video", "fusion"):
        fit = objective.optimize(rec, tree, config=fit_config, weights=weights,
                                 mode=mode, progress=progress)
        model = fit.model(tree)
        rep = compare_to_truth(model, truth, joints, ts, mode=mode,
                               scenario_hash=rec.scenario_hash)
        rep.attitude_map_deg = (attitude_map_error(model, truth, rec, ts)
                                if mode == "fusion" else None)
        out[mode] = {"fit": fit, "report": rep}
    out["delta"] = paired_delta(out["fusion"]["report"], out["video"]["report"])
    return out


def default_joints(scenario) -> list[str]:
    """Hip and knee of the sensorized side."""
    sides = {s["segment"].split("_")[0] for s in scenario.sensors}
    side = sorted(sides)[0] if sides else "r"
    return [f"{side}_hip", f"{side}_knee"]


def paired_delta(fusion_rep: ComparisonReport, video_rep: ComparisonReport) -> dict:
    """Fusion-minus-video metric deltas per joint (negative MAE deltas mean
    the sensors helped)."""
    out = {}
    for jf in fusion_rep.joints:
        jv = next(j for j in video_rep.joints if j.joint == jf.joint)
        out[jf.joint] = {
            "mae_deg": jf.mae_deg - jv.mae_deg,
            "mae_ma_deg": jf.mae_ma_deg - jv.mae_ma_deg,
            "pearson": (None if jf.pearson is None or jv.pearson is None
                        else jf.pearson - jv.pearson),
        }
    return out


# -- report files -----------------------------------------------------------------


def write_comparison_csv(path, reports: list[ComparisonReport]) -> None:
    """One row per (report, joint) for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_hash", "mode", "joint", "mae_deg", "mae_ma_deg",
                    "pearson", "attitude_map_deg", "n_times"])
        for rep in reports:
            for j in rep.joints:
                w.writerow([
                    rep.scenario_hash or "", rep.mode, j.joint,
                    _fmt(j.mae_deg), _fmt(j.mae_ma_deg), _fmt(j.pearson),
                    _fmt(rep.attitude_map_deg), rep.n_times,
                ])


def write_comparison_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x):
    return "" if x is None else repr(float(x))


def median_iqr(values) -> tuple[float, float]:
    """Summary convention for scenario batches: median and interquartile
    range."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        raise EvaluationError("no values to summarize")
    q1, q2, q3 = np.percentile(v, [25, 50, 75])
    return float(q2), float(q3 - q1)
