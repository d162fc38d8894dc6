"""The fusion objective: five loss terms, annealed sensor weighting, batch
sampling, and the staged three-group optimizer that jointly fits the
trajectory function, body shape, and sensor calibrations.

Loss terms (each averaged over the sampled batch):

    keypoint     confidence-weighted Huber (quadratic inside 1 m) on the
                 distance between centered model markers and centered
                 detections rotated into the global frame
    reprojection confidence-weighted Huber (quadratic inside 100 px) on the
                 pixel distance after rotating model markers into the camera
                 frame and projecting
    attitude     squared geodesic angle between model segment orientations
                 and calibrated sensor attitudes
    sensor gyro  mean squared error between predicted and measured IMU
                 angular velocity
    phone gyro   mean squared error on the camera angular velocity

Parameter groups follow the staged schedule: the trajectory and body shape
train from step 0 with an exponentially decaying learning rate; sensor
calibrations and time offsets activate at ``calib_activation_step`` while the
sensor-loss weights ramp from zero, which is what keeps the joint problem
stable.

Batches draw ``batch_size`` samples per data source each step using a
counter-based generator keyed by (seed, stream, step), so a fit is
bit-reproducible regardless of execution interleaving.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import binio, body, camera, sensors, so3, tape, trajectory
from .tape import Tensor

HUBER_KEYPOINT_M = 1.0      # quadratic inside 100 cm
HUBER_REPROJ_PX = 100.0     # quadratic inside 100 px
_EPS_NORM = 1e-24           # keeps sqrt pullbacks finite at zero distance
_EPS_ANGLE = 1e-18


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, step, last_loss):
        super().__init__(
            f"non-finite loss at step {step} (last finite total {last_loss!r})"
        )
        self.step = step
        self.last_loss = last_loss


# -- configuration -----------------------------------------------------------


@dataclass
class LossWeights:
    keypoint: float = 1.0        # on m^2-scale residuals
    reproj: float = 1e-4         # on px^2-scale residuals
    attitude: float = 0.02      # on rad^2
    gyro_sensor: float = 5e-4    # on (rad/s)^2
    gyro_phone: float = 1e-3
    # high-pass smoothness regularizer on the pose rate: penalizes
    # ||theta_dot(t + dt) - theta_dot(t)||^2, which is ~600x more sensitive
    # to above-band ringing of the implicit function than to gait-band
    # motion. Without it the network rings freely between video frames and
    # the ringing drowns the sensor terms' time-offset gradients.
    smooth: float = 0.01
    smooth_dt: float = 0.02      # s
    anneal_start: int = 10000
    anneal_end: int = 15000
    anneal_shape: str = "linear"  # or "smoothstep"

    def validate(self):
        for name in ("keypoint", "reproj", "attitude", "gyro_sensor",
                     "gyro_phone", "smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if self.smooth_dt <= 0:
            raise ValueError("smooth_dt must be positive")
        if self.anneal_start > self.anneal_end:
            raise ValueError("anneal start must not exceed end")
        if self.anneal_shape not in ("linear", "smoothstep"):
            raise ValueError(f"unknown anneal shape {self.anneal_shape!r}")

    def ramp(self, step: int) -> float:
        """Sensor-term multiplier in [0, 1]; nondecreasing in ``step``."""
        if step < self.anneal_start:
            return 0.0
        if step >= self.anneal_end or self.anneal_end == self.anneal_start:
            return 1.0
        u = (step - self.anneal_start) / (self.anneal_end - self.anneal_start)
        if self.anneal_shape == "smoothstep":
            return u * u * (3.0 - 2.0 * u)
        return u

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        w = cls(**d)
        w.validate()
        return w


@dataclass
class OptimizerConfig:
    steps: int = 20000
    batch_size: int = 500
    seed: int = 0
    # group A: trajectory weights + body shape
    traj_lr_start: float = 1e-4
    traj_lr_end: float = 1e-5
    traj_betas: tuple = (0.9, 0.8)
    weight_decay: float = 1e-5       # decoupled, trajectory weights only
    # group B: sensor calibrations
    calib_activation_step: int = 10000
    calib_lr: float = 1e-5
    calib_betas: tuple = (0.9, 0.999)
    # group C: time offsets (activates with group B)
    offset_lr: float = 1e-4
    offset_betas: tuple = (0.85, 0.999)
    freeze_phone_offset: bool = False
    grad_clip: float | None = None   # per-group gradient-norm cap, off by default
    # trajectory architecture
    hidden_layers: int = 3
    hidden_width: int = 96
    frequency_bands: int = 8
    include_linear: bool = True
    out_scale: float = 5e-3
    log_every: int = 500

    def validate(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch size must be positive")
        if not (self.traj_lr_start > 0 and self.traj_lr_end > 0
                and self.calib_lr > 0 and self.offset_lr > 0):
            raise ValueError("learning rates must be positive")
        if not 0 <= self.calib_activation_step < self.steps:
            raise ValueError("calibration activation step must precede total steps")

    def traj_lr(self, step: int) -> float:
        if self.steps <= 1:
            return self.traj_lr_start
        u = step / (self.steps - 1)
        return self.traj_lr_start * (self.traj_lr_end / self.traj_lr_start) ** u

    def trajectory_config(self, n_pose: int) -> trajectory.TrajectoryConfig:
        return trajectory.TrajectoryConfig(
            n_pose=n_pose,
            hidden_layers=self.hidden_layers,
            hidden_width=self.hidden_width,
            frequency_bands=self.frequency_bands,
            include_linear=self.include_linear,
            out_scale=self.out_scale,
        )

    def to_dict(self):
        d = asdict(self)
        d["traj_betas"] = list(self.traj_betas)
        d["calib_betas"] = list(self.calib_betas)
        d["offset_betas"] = list(self.offset_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("traj_betas", "calib_betas", "offset_betas"):
            if k in d:
                d[k] = tuple(d[k])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def scaled_config(steps: int, base: OptimizerConfig | None = None,
                  weights: LossWeights | None = None):
    """Shrink the default schedule proportionally for short runs: activation
    at half of ``steps``, sensor anneal over the following quarter."""
    cfg = base or OptimizerConfig()
    w = weights or LossWeights()
    ratio = steps / cfg.steps
    cfg = OptimizerConfig(**{**cfg.to_dict(), "steps": steps,
                             "calib_activation_step": int(cfg.calib_activation_step * ratio)})
    w = LossWeights(**{**w.to_dict(),
                       "anneal_start": int(w.anneal_start * ratio),
                       "anneal_end": int(w.anneal_end * ratio)})
    cfg.traj_betas = tuple(cfg.traj_betas)
    cfg.calib_betas = tuple(cfg.calib_betas)
    cfg.offset_betas = tuple(cfg.offset_betas)
    return cfg, w


# -- loss terms ---------------------------------------------------------------


def huber(r, delta):
    """Quadratic inside ``delta``, linear outside; C1 at the joint."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or delta < 0:
        raise ValueError("huber expects nonnegative residuals and threshold")
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def _huber_sq(sq, delta):
    """Huber on sqrt(sq), written on the squared residual so the gradient is
    finite at zero distance (Tensor-friendly)."""
    r = tape.sqrt(sq + _EPS_NORM)
    rv = tape.value_of(r)
    return tape.where(rv <= delta, 0.5 * sq, delta * (r - 0.5 * delta))


def keypoint_loss(p_model, p_cam, conf, cam_rot, delta=HUBER_KEYPOINT_M):
    """Centered 3D keypoint loss per Huber(distances), confidence weighted.

    ``p_model`` (..., M, 3) global-frame markers, ``p_cam`` detections in the
    camera frame, ``cam_rot`` (..., 3, 3) camera orientation estimates.
    Returns the batch-mean scalar.
    """
    n_mark = tape.value_of(p_model).shape[-2]
    conf_v = tape.value_of(conf)
    p_glob = tape.matmul(cam_rot, tape.transpose_last2(p_cam))
    p_glob = tape.transpose_last2(p_glob)
    a = camera.center_keypoints(p_model, conf_v)
    b = camera.center_keypoints(p_glob, conf_v)
    d = a - b
    sq = tape.tsum(d * d, axis=-1)
    per = conf_v * _huber_sq(sq, delta)
    return tape.tmean(tape.tsum(per, axis=-1) * (1.0 / n_mark))


def reprojection_loss(p_model, x2d, conf, cam_rot, intr, delta=HUBER_REPROJ_PX):
    """Pixel-space Huber loss; model markers are rotated into the camera
    frame and projected. Behind-camera points are masked out (their count is
    visible to the caller via :func:`behind_camera_count`)."""
    n_mark = tape.value_of(p_model).shape[-2]
    conf_v = tape.value_of(conf)
    p_camf = tape.matmul(tape.transpose_last2(cam_rot),
                         tape.transpose_last2(p_model))
    p_camf = tape.transpose_last2(p_camf)
    px, valid = camera.project_masked(intr, p_camf)
    d = px - x2d
    sq = tape.tsum(d * d, axis=-1)
    per = (conf_v * valid) * _huber_sq(sq, delta)
    return tape.tmean(tape.tsum(per, axis=-1) * (1.0 / n_mark))


def behind_camera_count(p_model, cam_rot) -> int:
    p = tape.value_of(p_model)
    r = tape.value_of(cam_rot)
    z = np.matmul(np.swapaxes(r, -1, -2), np.swapaxes(p, -1, -2))[..., 2, :]
    return int(np.count_nonzero(z <= camera.MIN_DEPTH))


def _stable_sq_angle(rel):
    """Squared geodesic angle of relative rotations, safe to differentiate
    at zero angle (atan2 of the skew norm against the trace)."""
    skw = 0.5 * (rel - tape.transpose_last2(rel))
    v = so3.vee(skw)
    s = tape.sqrt(tape.tsum(v * v, axis=-1) + _EPS_ANGLE)
    tr = rel[..., 0, 0] + rel[..., 1, 1] + rel[..., 2, 2]
    c = 0.5 * (tr - 1.0)
    ang = tape.atan2(s, c)
    return ang * ang


def attitude_loss(seg_rot, pred_att):
    """Mean squared geodesic angle (rad^2) between model segment orientations
    and calibrated sensor attitudes, for one sensor's batch."""
    rel = tape.matmul(seg_rot, tape.transpose_last2(pred_att))
    return tape.tmean(_stable_sq_angle(rel))


def gyro_loss(pred, meas):
    """Mean squared angular-velocity error (rad/s)^2 over a batch."""
    d = pred - meas
    return tape.tmean(tape.tsum(d * d, axis=-1))


def smoothness_loss(rate_a, rate_b):
    """Mean squared change of the pose rate across a short interval; the
    high-pass regularizer that keeps the implicit function band-limited."""
    d = rate_b - rate_a
    return tape.tmean(tape.tsum(d * d, axis=-1))


def gyro_losses(pred_sensor, meas_sensor, pred_phone, meas_phone):
    """(sensor term averaged over sensors, phone term). Inputs are lists per
    sensor plus the phone pair."""
    if len(pred_sensor) != len(meas_sensor):
        raise ValueError("per-sensor prediction/measurement mismatch")
    if pred_sensor:
        terms = [gyro_loss(p, m) for p, m in zip(pred_sensor, meas_sensor)]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        sensor_term = total * (1.0 / len(terms))
    else:
        sensor_term = 0.0
    phone_term = gyro_loss(pred_phone, meas_phone)
    return sensor_term, phone_term


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with optional decoupled weight decay and per-group gradient-norm
    clipping; operates in place on a list of parameter arrays."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decay_mask=None, clip=None):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask if decay_mask is not None else [True] * len(params)
        self.clip = clip
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr):
        if self.clip is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if total > self.clip:
                grads = [g * (self.clip / total) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v,
                                     self.decay_mask):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and decay:
                p -= lr * self.weight_decay * p


def _stream_rng(seed: int, stream: str, step: int):
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(
        np.random.Philox(counter=np.array([step, 0, 0, 0], dtype=np.uint64), key=key)
    )


def sample_indices(seed, stream, step, population, batch):
    """Deterministic batch of sample indices for one data source."""
    if population <= 0:
        return np.empty(0, dtype=np.int64)
    rng = _stream_rng(seed, stream, step)
    return rng.integers(0, population, size=batch)


# -- results ------------------------------------------------------------------


@dataclass
class FitResult:
    phi: trajectory.TrajectoryParams
    beta: body.ScaleParams
    calibration: sensors.SensorCalibration
    mode: str
    steps: int
    duration: float
    loss_history: dict
    residuals: object = None          # evaluation.ResidualReport
    config: OptimizerConfig = None
    weights: LossWeights = None
    tree_hash: str = ""
    scenario_hash: str | None = None

    def model(self, tree: body.KinematicTree) -> "FusionModel":
        if tree.descriptor_hash() != self.tree_hash:
            raise ValueError("fit was produced with a different body model")
        return FusionModel(tree, self.phi, self.beta, self.calibration,
                           self.duration)

    # -- persistence ----------------------------------------------------------

    def save(self, outdir) -> None:
        os.makedirs(outdir, exist_ok=True)
        meta = {
            "kind": "fit",
            "mode": self.mode,
            "steps": self.steps,
            "duration": self.duration,
            "config": self.config.to_dict() if self.config else None,
            "weights": self.weights.to_dict() if self.weights else None,
            "tree_hash": self.tree_hash,
            "scenario_hash": self.scenario_hash,
            "net_config": asdict(self.phi.config),
            "sensor_ids": self.calibration.sensor_ids,
        }
        arrays = {
            "phi": self.phi.values,
            "log_scales": self.beta.log_scales,
            "marker_offsets": self.beta.marker_offsets,
            "rsb": self.calibration.rsb,
            "knots": self.calibration.knots,
            "imu_delta": self.calibration.imu_delta,
            "phone_delta": np.array([self.calibration.phone_delta]),
        }
        for k, v in self.loss_history.items():
            arrays[f"hist_{k}"] = np.asarray(v, dtype=np.float64)
        binio.save_arrays(os.path.join(outdir, "checkpoint.bin"), meta, arrays)
        summary = {
            "mode": self.mode,
            "steps": self.steps,
            "duration_s": self.duration,
            "scenario_hash": self.scenario_hash,
            "tree_hash": self.tree_hash,
            "final_losses": {k: float(v[-1]) for k, v in self.loss_history.items()
                             if len(v)},
            "residuals": (self.residuals.to_dict()
                          if self.residuals is not None else None),
            "calibration": {
                "imu_delta_s": [float(d) for d in self.calibration.imu_delta],
                "phone_delta_s": float(self.calibration.phone_delta),
            },
        }
        with open(os.path.join(outdir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, outdir) -> "FitResult":
        meta, arrays = binio.load_arrays(os.path.join(outdir, "checkpoint.bin"))
        if meta.get("kind") != "fit":
            raise binio.FormatError(f"{outdir}: not a fit checkpoint")
        net_cfg = trajectory.TrajectoryConfig(**meta["net_config"])
        phi = trajectory.TrajectoryParams(arrays.pop("phi"), net_cfg)
        beta = body.ScaleParams(arrays.pop("log_scales"),
                                arrays.pop("marker_offsets"))
        calib = sensors.SensorCalibration(
            sensor_ids=list(meta["sensor_ids"]),
            rsb=arrays.pop("rsb"),
            knots=arrays.pop("knots"),
            imu_delta=arrays.pop("imu_delta"),
            phone_delta=float(arrays.pop("phone_delta")[0]),
        )
        hist = {k[5:]: v for k, v in arrays.items() if k.startswith("hist_")}
        cfg = (OptimizerConfig.from_dict(meta["config"])
               if meta.get("config") else None)
        w = LossWeights.from_dict(meta["weights"]) if meta.get("weights") else None
        return cls(
            phi=phi, beta=beta, calibration=calib, mode=meta["mode"],
            steps=int(meta["steps"]), duration=float(meta["duration"]),
            loss_history=hist, config=cfg, weights=w,
            tree_hash=meta.get("tree_hash", ""),
            scenario_hash=meta.get("scenario_hash"),
        )


class KinematicModel:
    """Value-path evaluator shared by fitted models and ground truth: poses,
    markers, segment orientations, camera, and predicted sensor readings at
    arbitrary recording times. Subclasses provide ``theta``,
    ``theta_with_rate``, and ``camera_rot`` plus the ``tree``, ``beta``,
    ``calibration``, and ``duration`` attributes."""

    tree = None
    beta = None
    calibration = None
    duration = None

    def theta(self, ts):
        raise NotImplementedError

    def theta_with_rate(self, ts):
        raise NotImplementedError

    def camera_rot(self, ts, with_rate=False):
        raise NotImplementedError

    def markers(self, ts):
        out = body.forward_kinematics(self.tree, self.beta, self.theta(ts))
        return out.markers

    def segment_rotations(self, ts, with_rate=False):
        if with_rate:
            th, thd = self.theta_with_rate(ts)
            return body.fk_time_derivative(self.tree, self.beta, th, thd)
        out = body.forward_kinematics(self.tree, self.beta, self.theta(ts))
        return out.seg_rot

    def joint_angles(self, ts, joints):
        th = self.theta(ts)
        cols = [body.extract_joint_angle(self.tree, th, j) for j in joints]
        return np.stack(cols, axis=-1)

    def predicted_attitude_for(self, sensor_id, reading_rot, ts_device):
        """Composite calibrated attitude map at device timestamps."""
        cal = self.calibration
        i = cal.index(sensor_id)
        t_rec = sensors.resolve_time(ts_device, cal.imu_delta[i])
        drift = sensors.drift_matrices(cal.knots[i], t_rec, self.duration)
        rsb = so3.quat_to_matrix(cal.rsb[i])
        return sensors.predicted_attitude(drift, reading_rot, rsb)


class FusionModel(KinematicModel):
    """Evaluator backed by a fitted trajectory network."""

    def __init__(self, tree, phi, beta, calibration, duration):
        self.tree = tree
        self.phi = phi
        self.beta = beta
        self.calibration = calibration
        self.duration = duration

    def net(self, ts, with_rate=False) -> trajectory.NetOutput:
        if with_rate:
            return trajectory.eval_with_time_derivative(self.phi, ts, self.duration)
        return trajectory.eval_trajectory(self.phi, ts, self.duration)

    def theta(self, ts):
        return self.net(ts).theta

    def theta_with_rate(self, ts):
        out = self.net(ts, with_rate=True)
        return out.theta, out.theta_dot

    def camera_rot(self, ts, with_rate=False):
        out = self.net(ts, with_rate=with_rate)
        if with_rate:
            return out.camera, out.camera_dot
        return out.camera


# -- the fit loop --------------------------------------------------------------


def _translation_warm_start(phi_cfg, phi_values, frames):
    """Bias the translation outputs to the confidence-weighted centroid of
    the detections so optimization starts with the body inside the view
    frustum instead of inside the camera."""
    w = frames.conf[..., None]
    denom = float(np.sum(w))
    if denom <= 0:
        return
    centroid = np.sum(frames.p_cam * w, axis=(0, 1)) / denom
    shapes = phi_cfg.layer_shapes()
    bias_start = phi_values.size - shapes[-1][1][0]
    phi_values[bias_start : bias_start + 3] = centroid


class _Problem:
    """Precomputed constant views of the recording used by every step."""

    def __init__(self, rec, tree, mode):
        self.tree = tree
        self.duration = rec.duration
        self.intr = rec.intrinsics
        self.frames = rec.keypoints
        self.mode = mode
        if tree.n_markers != rec.keypoints.n_markers:
            raise ValueError(
                f"recording has {rec.keypoints.n_markers} keypoints but the "
                f"model defines {tree.n_markers} markers"
            )
        self.sensor_streams = rec.sensor_streams if mode == "fusion" else []
        self.phone = rec.phone if mode == "fusion" else None
        self.seg_index = [tree.segment_index(s.segment) for s in self.sensor_streams]
        self.chain = tree.ancestors_closure(self.seg_index) if self.seg_index else []
        self.att_rot = [s.att_matrices() for s in self.sensor_streams]


def optimize(rec, tree, config: OptimizerConfig | None = None,
             weights: LossWeights | None = None, mode: str = "fusion",
             progress=None) -> FitResult:
    """Fit trajectory, body shape, and calibrations to a recording.

    ``mode='video'`` disables every sensor term (and groups B/C). The fit is
    deterministic given the config seed. ``progress`` is an optional callable
    ``(step, dict_of_losses)`` invoked every ``config.log_every`` steps.
    """
    config = config or OptimizerConfig()
    weights = weights or LossWeights()
    config.validate()
    weights.validate()
    if mode not in ("fusion", "video"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "fusion" and not rec.sensor_streams:
        raise ValueError("fusion mode requires sensor streams")

    prob = _Problem(rec, tree, mode)
    T = rec.duration
    net_cfg = config.trajectory_config(tree.n_dofs)
    phi = trajectory.init_trajectory(config.seed, net_cfg)
    _translation_warm_start(net_cfg, phi.values, rec.keypoints)

    scales = np.zeros(tree.n_scale_groups)
    offsets = np.zeros((tree.n_markers, 3))
    n_s = len(prob.sensor_streams)
    calib = sensors.SensorCalibration.identity([s.sensor_id for s in prob.sensor_streams])
    deltas = np.zeros(n_s + 1)  # [imu..., phone]

    opt_a = Adam([phi.values, scales, offsets], betas=config.traj_betas,
                 weight_decay=config.weight_decay,
                 decay_mask=[True, False, False], clip=config.grad_clip)
    opt_b = Adam([calib.rsb, calib.knots], betas=config.calib_betas,
                 clip=config.grad_clip)
    opt_c = Adam([deltas], betas=config.offset_betas, clip=config.grad_clip)
    offset_mask = np.ones_like(deltas)
    if config.freeze_phone_offset:
        offset_mask[-1] = 0.0

    hist_keys = ("total", "keypoint", "reproj", "attitude", "gyro_sensor",
                 "gyro_phone", "smooth")
    history = {k: np.zeros(config.steps) for k in hist_keys}
    history["step"] = np.arange(config.steps, dtype=np.float64)
    last_finite = None

    n_frames = prob.frames.n_frames
    off_lim = tree.marker_offset_limit_m

    batch = config.batch_size
    # each modality contributes batch_size samples per step; the attitude and
    # gyro modalities split theirs evenly across sensors
    b_s = max(1, batch // n_s) if n_s else 0
    n_pose = tree.n_dofs

    for step in range(config.steps):
        ramp = weights.ramp(step) if mode == "fusion" else 0.0
        use_sensors = ramp > 0.0 and n_s > 0

        phi_t = Tensor(phi.values)
        sc_t = Tensor(scales)
        of_t = Tensor(offsets)
        leaves_a = (phi_t, sc_t, of_t)

        idx_v = sample_indices(config.seed, "video", step, n_frames, batch)
        t_v = prob.frames.t[idx_v]
        n_v = len(idx_v)
        terms = {}

        if use_sensors:
            rsb_t = Tensor(calib.rsb)
            knots_t = Tensor(calib.knots)
            del_t = Tensor(deltas)
            rsb_mats = so3.quat_to_matrix(rsb_t)          # (n_s, 3, 3)
            rsb_b = tape.reshape(rsb_mats, (n_s, 1, 3, 3))
            del_imu = tape.reshape(del_t[:n_s], (n_s, 1))

            att_idx = np.stack([
                sample_indices(config.seed, f"att:{s.sensor_id}", step,
                               s.att_t.size, b_s)
                for s in prob.sensor_streams
            ])
            gyro_idx = np.stack([
                sample_indices(config.seed, f"gyro:{s.sensor_id}", step,
                               s.gyro_t.size, b_s)
                for s in prob.sensor_streams
            ])
            idx_p = sample_indices(config.seed, "phone", step,
                                   prob.phone.t.size, batch)

            att_tau = np.stack([s.att_t[att_idx[i]]
                                for i, s in enumerate(prob.sensor_streams)])
            gyro_tau = np.stack([s.gyro_t[gyro_idx[i]]
                                 for i, s in enumerate(prob.sensor_streams)])
            att_times = att_tau + del_imu                  # (n_s, B)
            gyro_times = gyro_tau + del_imu
            phone_time = prob.phone.t[idx_p] + del_t[n_s]

            # pass 1 (no rates): video + attitude samples
            t1 = tape.concatenate(
                [tape.astensor(t_v), tape.reshape(att_times, (n_s * b_s,))])
            th1, head1, _, _ = trajectory.trajectory_raw(phi_t, t1, T, net_cfg)
            th_v = th1[:n_v]
            cam_v = trajectory.orthonormalize_head(head1[:n_v])
            th_att = tape.reshape(th1[n_v:], (n_s, b_s, n_pose))

            # pass 2 (with rates): sensor gyro + phone gyro samples
            t2 = tape.concatenate(
                [tape.reshape(gyro_times, (n_s * b_s,)), phone_time])
            th2, head2, thd2, headd2 = trajectory.trajectory_raw(
                phi_t, t2, T, net_cfg, with_rate=True)
            n_g = n_s * b_s
            th_g = tape.reshape(th2[:n_g], (n_s, b_s, n_pose))
            thd_g = tape.reshape(thd2[:n_g], (n_s, b_s, n_pose))
            cam_p, camd_p = trajectory.orthonormalize_head_with_rate(
                head2[n_g:], headd2[n_g:])
        else:
            th1, head1, _, _ = trajectory.trajectory_raw(phi_t, t_v, T, net_cfg)
            th_v = th1
            cam_v = trajectory.orthonormalize_head(head1)

        # video losses
        mk_v, _, _, _ = body.fk_chain(prob.tree, (sc_t, of_t), th_v)
        terms["keypoint"] = keypoint_loss(
            mk_v, prob.frames.p_cam[idx_v], prob.frames.conf[idx_v], cam_v)
        terms["reproj"] = reprojection_loss(
            mk_v, prob.frames.x2d[idx_v], prob.frames.conf[idx_v], cam_v,
            prob.intr)

        # band-limiting regularizer on the pose rate (both modes, all steps)
        if weights.smooth > 0:
            b_sm = max(1, batch // 2)
            rng_s = _stream_rng(config.seed, "smooth", step)
            t_s = rng_s.uniform(0.0, T - weights.smooth_dt, size=b_sm)
            t_pair = np.concatenate([t_s, t_s + weights.smooth_dt])
            _, _, thd_s, _ = trajectory.trajectory_raw(phi_t, t_pair, T,
                                                       net_cfg, with_rate=True)
            terms["smooth"] = smoothness_loss(thd_s[:b_sm], thd_s[b_sm:])

        if use_sensors:
            # attitude: all sensors in one (n_s, B, ...) batch
            _, _, rot_att, _ = body.fk_chain(
                prob.tree, (sc_t, of_t), th_att, segments=prob.seg_index,
                want_markers=False)
            model_att = tape.stack(
                [rot_att[prob.seg_index[i]][i] for i in range(n_s)])
            drift = so3.heading_graph(knots_t, att_times, T)
            readings = np.stack([prob.att_rot[i][att_idx[i]]
                                 for i in range(n_s)])
            pred_att = sensors.predicted_attitude(drift, readings, rsb_b)
            terms["attitude"] = attitude_loss(model_att, pred_att)

            # sensor gyro
            _, _, rot_g, rotd_g = body.fk_chain(
                prob.tree, (sc_t, of_t), th_g, theta_dot=thd_g,
                segments=prob.seg_index, want_markers=False)
            rot_sel = tape.stack(
                [rot_g[prob.seg_index[i]][i] for i in range(n_s)])
            rotd_sel = tape.stack(
                [rotd_g[prob.seg_index[i]][i] for i in range(n_s)])
            pred_gyro = sensors.predicted_sensor_gyro(rsb_b, rot_sel, rotd_sel)
            meas = np.stack([s.gyro_w[gyro_idx[i]]
                             for i, s in enumerate(prob.sensor_streams)])
            terms["gyro_sensor"] = gyro_loss(pred_gyro, meas)
            pred_phone = sensors.predicted_phone_gyro(cam_p, camd_p)
            terms["gyro_phone"] = gyro_loss(pred_phone, prob.phone.w[idx_p])

        total = terms["keypoint"] * weights.keypoint \
            + terms["reproj"] * weights.reproj
        if "smooth" in terms:
            total = total + terms["smooth"] * weights.smooth
        if use_sensors:
            total = total \
                + terms["attitude"] * (weights.attitude * ramp) \
                + terms["gyro_sensor"] * (weights.gyro_sensor * ramp) \
                + terms["gyro_phone"] * (weights.gyro_phone * ramp)

        total_v = float(total.value)
        if not np.isfinite(total_v):
            raise DivergenceError(step, last_finite)
        last_finite = total_v

        for k in hist_keys:
            if k == "total":
                history["total"][step] = total_v
            else:
                history[k][step] = (float(tape.value_of(terms[k]))
                                    if k in terms else np.nan)

        tape.backward(total)

        grads_a = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
                   for leaf in leaves_a]
        opt_a.step(grads_a, config.traj_lr(step))
        np.clip(offsets, -off_lim, off_lim, out=offsets)

        if use_sensors and step >= config.calib_activation_step:
            grads_b = [
                rsb_t.grad if rsb_t.grad is not None else np.zeros_like(calib.rsb),
                knots_t.grad if knots_t.grad is not None else np.zeros_like(calib.knots),
            ]
            opt_b.step(grads_b, config.calib_lr)
            gd = del_t.grad if del_t.grad is not None else np.zeros_like(deltas)
            opt_c.step([gd * offset_mask], config.offset_lr)
            np.clip(deltas, -sensors.MAX_TIME_OFFSET, sensors.MAX_TIME_OFFSET,
                    out=deltas)

        if progress is not None and (step % config.log_every == 0
                                     or step == config.steps - 1):
            progress(step, {k: history[k][step] for k in hist_keys})

    calib.rsb = so3.normalize_quat(calib.rsb)
    calib.knots = so3.normalize_quat(calib.knots)
    calib.imu_delta = deltas[:n_s].copy()
    calib.phone_delta = float(deltas[n_s]) if deltas.size > n_s else 0.0

    result = FitResult(
        phi=phi,
        beta=body.ScaleParams(scales, offsets),
        calibration=calib,
        mode=mode,
        steps=config.steps,
        duration=T,
        loss_history=history,
        config=config,
        weights=weights,
        tree_hash=tree.descriptor_hash(),
        scenario_hash=rec.scenario_hash,
    )

    from . import evaluation  # late import: evaluation depends on this module

    result.residuals = evaluation.compute_residuals(result.model(tree), rec)
    return result
