"""Ground-truth recording simulator.

Generates a gait-like walking trajectory, a panning handheld camera, keypoint
observations, and IMU streams with known calibrations, heading drift, noise,
time offsets, and occlusion masks. Every trajectory ingredient is built from
fixed-axis rotations and sinusoid sums, so the true time derivatives (and
therefore the true gyroscope readings) are exact rather than numerically
differenced.

Frame conventions: the world frame coincides with the camera's base frame
(x right, y down, z along the optical axis at zero pan), the camera sits at
the origin, and the vertical is -y. The walker follows a straight line at a
configurable bearing while the camera pan tracks the pelvis bearing with a
small handheld wobble.

The true trajectory is regenerable from the scenario config alone, so the
ground-truth sidecar stores the config plus its hash; evaluation rebuilds the
analytic truth from it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import body, camera, objective, recording as rec_mod, sensors, so3

TRUTH_SCHEMA = "kinefuse-truth/1"
TRUTH_NAME = "truth.json"
OCCLUDED_SIGMA_MM = 10000.0   # drives the confidence sigmoid to exactly zero

UP_WORLD = np.array([0.0, -1.0, 0.0])
# model frame (x forward, z up) into the camera-aligned world (y down,
# z forward): columns are the images of the model basis vectors
ALIGN_MODEL_TO_WORLD = np.array(
    [[0.0, -1.0, 0.0],
     [0.0, 0.0, -1.0],
     [1.0, 0.0, 0.0]]
)


class ScenarioError(ValueError):
    """Invalid scenario configuration."""


def default_joint_profiles() -> dict:
    """Sinusoid-sum gait profiles per DOF (degrees, phases in radians).

    Component rows are (frequency multiple, amplitude, phase). The
    incommensurate low-frequency components keep the traces aperiodic so a
    video-only fit cannot fill occluded spans by periodic extrapolation.
    """
    swing = np.pi  # left lags right by half a cycle
    return {
        "r_knee": {"mean_deg": 27.0,
                   "components": [[1.0, 19.0, -1.25], [2.0, 8.0, 0.55],
                                  [0.37, 4.5, 0.9]]},
        "l_knee": {"mean_deg": 27.0,
                   "components": [[1.0, 19.0, -1.25 + swing], [2.0, 8.0, 0.55 + swing],
                                  [0.43, 4.5, 2.1]]},
        "r_hip_0": {"mean_deg": -6.0,
                    "components": [[1.0, 17.0, 0.35], [0.31, 3.0, 0.2]]},
        "l_hip_0": {"mean_deg": -6.0,
                    "components": [[1.0, 17.0, 0.35 + swing], [0.41, 3.0, 1.3]]},
        "r_hip_1": {"mean_deg": 2.0, "components": [[1.0, 3.5, 1.1]]},
        "l_hip_1": {"mean_deg": -2.0, "components": [[1.0, 3.5, 1.1 + swing]]},
        "r_hip_2": {"mean_deg": 1.0, "components": [[1.0, 2.5, -0.4]]},
        "l_hip_2": {"mean_deg": -1.0, "components": [[1.0, 2.5, -0.4 + swing]]},
        "r_ankle": {"mean_deg": -4.0,
                    "components": [[1.0, 8.0, 2.2], [2.0, 3.5, -0.7]]},
        "l_ankle": {"mean_deg": -4.0,
                    "components": [[1.0, 8.0, 2.2 + swing], [2.0, 3.5, -0.7 + swing]]},
        "spine_0": {"mean_deg": 0.0, "components": [[1.0, 1.5, 0.3]]},
        "spine_1": {"mean_deg": 2.0, "components": [[2.0, 1.2, 0.0]]},
        "spine_2": {"mean_deg": 0.0, "components": [[1.0, 2.0, 1.8]]},
        "neck": {"mean_deg": 1.0, "components": [[2.0, 1.0, 0.9]]},
    }


def default_sensors() -> list[dict]:
    return [
        {"id": "imu_thigh", "segment": "r_thigh",
         "rsb_rotvec_deg": [6.0, -4.0, 5.0],
         "drift_yaw_deg": [0.0, 3.0, 5.0],
         "delta_s": 0.2},
        {"id": "imu_shank", "segment": "r_shank",
         "rsb_rotvec_deg": [-5.0, 3.0, 6.0],
         "drift_yaw_deg": [0.0, -2.0, -4.0],
         "delta_s": 0.2},
    ]


DEFAULT_INTRINSICS = {"fx": 900.0, "fy": 900.0, "cx": 640.0, "cy": 360.0,
                      "width": 1280, "height": 720}


@dataclass
class ScenarioConfig:
    name: str = "default"
    seed: int = 0
    duration_s: float = 10.0
    gait_frequency_hz: float = 1.0
    keypoint_rate_hz: float = 30.0
    attitude_rate_hz: float = 55.0
    gyro_rate_hz: float = 562.5
    phone_gyro_rate_hz: float = 100.0
    eval_rate_hz: float = 30.0
    walk_speed_m_s: float = 0.9
    walk_heading_deg: float = 25.0
    start_x_m: float = -0.3
    start_z_m: float = 3.2
    bob_amp_m: float = 0.015
    sway_amp_m: float = 0.02
    heading_sway_deg: float = 4.0
    pelvis_sway_deg: float = 2.0
    camera_tilt_deg: float = 2.0
    camera_wobble_deg: float = 1.5
    camera_wobble_hz: float = 0.45
    camera_roll_deg: float = 0.8
    keypoint_sigma_mm: float = 0.0
    pixel_noise_px: float = 0.0
    attitude_noise_deg: float = 0.0
    gyro_noise_rad_s: float = 0.0
    occlusion: list | None = None
    sensors: list = field(default_factory=default_sensors)
    phone_delta_s: float = 0.0
    true_log_scales: list = field(default_factory=lambda: [0.03, -0.02, 0.01, 0.0,
                                                           0.02, -0.01, -0.015, 0.01])
    joint_profiles: dict = field(default_factory=default_joint_profiles)
    intrinsics: dict = field(default_factory=lambda: dict(DEFAULT_INTRINSICS))

    def validate(self):
        if self.duration_s <= 0:
            raise ScenarioError("duration must be positive")
        for f in ("keypoint_sigma_mm", "pixel_noise_px", "attitude_noise_deg",
                  "gyro_noise_rad_s"):
            if getattr(self, f) < 0:
                raise ScenarioError(f"{f} must be nonnegative")
        if self.occlusion is not None:
            a, b = self.occlusion
            if not (0.0 <= a <= b <= 1.0):
                raise ScenarioError("occlusion window must satisfy 0 <= a <= b <= 1")
        ids = [s["id"] for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate sensor ids")
        for s in self.sensors:
            if abs(s.get("delta_s", 0.0)) > sensors.MAX_TIME_OFFSET:
                raise ScenarioError("true time offset exceeds the allowed range")

    def to_dict(self) -> dict:
        return {
            "name": self.name, "seed": self.seed, "duration_s": self.duration_s,
            "gait_frequency_hz": self.gait_frequency_hz,
            "keypoint_rate_hz": self.keypoint_rate_hz,
            "attitude_rate_hz": self.attitude_rate_hz,
            "gyro_rate_hz": self.gyro_rate_hz,
            "phone_gyro_rate_hz": self.phone_gyro_rate_hz,
            "eval_rate_hz": self.eval_rate_hz,
            "walk_speed_m_s": self.walk_speed_m_s,
            "walk_heading_deg": self.walk_heading_deg,
            "start_x_m": self.start_x_m, "start_z_m": self.start_z_m,
            "bob_amp_m": self.bob_amp_m, "sway_amp_m": self.sway_amp_m,
            "heading_sway_deg": self.heading_sway_deg,
            "pelvis_sway_deg": self.pelvis_sway_deg,
            "camera_tilt_deg": self.camera_tilt_deg,
            "camera_wobble_deg": self.camera_wobble_deg,
            "camera_wobble_hz": self.camera_wobble_hz,
            "camera_roll_deg": self.camera_roll_deg,
            "keypoint_sigma_mm": self.keypoint_sigma_mm,
            "pixel_noise_px": self.pixel_noise_px,
            "attitude_noise_deg": self.attitude_noise_deg,
            "gyro_noise_rad_s": self.gyro_noise_rad_s,
            "occlusion": list(self.occlusion) if self.occlusion else None,
            "sensors": copy.deepcopy(self.sensors),
            "phone_delta_s": self.phone_delta_s,
            "true_log_scales": list(self.true_log_scales),
            "joint_profiles": copy.deepcopy(self.joint_profiles),
            "intrinsics": dict(self.intrinsics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def scenario_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _rot_about(axis, angle):
    """exp(angle [axis]) for a constant unit axis; angle may be batched."""
    k = so3.skew(np.asarray(axis, dtype=np.float64))
    angle = np.asarray(angle, dtype=np.float64)
    s = np.sin(angle)[..., None, None]
    c1 = (1.0 - np.cos(angle))[..., None, None]
    return np.eye(3) + s * k + c1 * (k @ k)


def _left_jacobian_inv(phi):
    """Inverse left Jacobian of SO(3) at rotation vectors ``phi``."""
    phi = np.asarray(phi, dtype=np.float64)
    a = np.linalg.norm(phi, axis=-1)
    k = so3.skew(phi)
    k2 = k @ k
    small = a < 1e-6
    a_safe = np.where(small, 1.0, a)
    c = np.where(
        small,
        1.0 / 12.0 + a * a / 720.0,
        (1.0 / (a_safe * a_safe))
        - (1.0 + np.cos(a_safe)) / (2.0 * a_safe * np.sin(a_safe)),
    )
    return np.eye(3) - 0.5 * k + c[..., None, None] * k2


def _quat_to_rotvec(q):
    q = so3.canonicalize_quat(q)
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(n, q[..., 0])
    small = n < 1e-12
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, n))
    return scale[..., None] * v


class GroundTruthModel(objective.KinematicModel):
    """Analytic true trajectory exposed through the same evaluator interface
    as a fitted model; never visible to the optimizer."""

    def __init__(self, config: ScenarioConfig, tree: body.KinematicTree):
        self.config = config
        self.tree = tree
        self.duration = config.duration_s
        self.beta = body.ScaleParams(
            np.asarray(config.true_log_scales, dtype=np.float64),
            np.zeros((tree.n_markers, 3)),
        )
        if len(config.true_log_scales) != tree.n_scale_groups:
            raise ScenarioError("true_log_scales length must match the model")
        self.calibration = true_calibration(config)
        self._profiles = self._compile_profiles(config, tree)
        f = config.gait_frequency_hz
        self._heading0 = np.radians(config.walk_heading_deg)
        self._walk_dir = np.array(
            [np.sin(self._heading0), 0.0, np.cos(self._heading0)]
        )
        self._lateral = np.cross(UP_WORLD, self._walk_dir)
        self._p0 = np.array([config.start_x_m, 0.0, config.start_z_m])
        self._pelvis_axis = np.array([1.0, 0.0, 0.0])  # model-frame sway axis
        self._f = f

    @staticmethod
    def _compile_profiles(config, tree):
        unknown = set(config.joint_profiles) - set(tree.dof_names)
        if unknown:
            raise ScenarioError(
                f"joint profiles reference unknown DOFs: {sorted(unknown)}; "
                f"valid names: {tree.dof_names}"
            )
        profs = []
        for name in tree.dof_names:
            p = config.joint_profiles.get(name)
            if p is None:
                profs.append((0.0, np.zeros((0, 3))))
            else:
                comps = np.asarray(p.get("components", []), dtype=np.float64)
                comps = comps.reshape(-1, 3)
                profs.append((np.radians(p.get("mean_deg", 0.0)),
                              comps))
        return profs

    # -- root path -------------------------------------------------------

    def _root_translation(self, ts, rate=False):
        c = self.config
        f = self._f
        two_pi = 2.0 * np.pi
        if not rate:
            bob = c.bob_amp_m * np.sin(two_pi * 2 * f * ts + 0.4)
            sway = c.sway_amp_m * np.sin(two_pi * f * ts + 1.1)
            return (self._p0[None, :]
                    + c.walk_speed_m_s * ts[:, None] * self._walk_dir
                    + bob[:, None] * UP_WORLD * -1.0
                    + sway[:, None] * self._lateral)
        bob_d = c.bob_amp_m * two_pi * 2 * f * np.cos(two_pi * 2 * f * ts + 0.4)
        sway_d = c.sway_amp_m * two_pi * f * np.cos(two_pi * f * ts + 1.1)
        return (c.walk_speed_m_s * self._walk_dir[None, :]
                + bob_d[:, None] * UP_WORLD * -1.0
                + sway_d[:, None] * self._lateral)

    def _heading(self, ts, rate=False):
        c = self.config
        amp = np.radians(c.heading_sway_deg)
        w = 2.0 * np.pi * self._f
        if not rate:
            return self._heading0 + amp * np.sin(w * ts + 0.7)
        return amp * w * np.cos(w * ts + 0.7)

    def _pelvis_sway(self, ts, rate=False):
        c = self.config
        amp = np.radians(c.pelvis_sway_deg)
        w = 2.0 * np.pi * self._f
        if not rate:
            return amp * np.sin(w * ts + 2.0)
        return amp * w * np.cos(w * ts + 2.0)

    def _root_rotation(self, ts):
        h = self._heading(ts)
        s = self._pelvis_sway(ts)
        v = _rot_about(UP_WORLD, h)
        sw = _rot_about(self._pelvis_axis, s)
        return v @ ALIGN_MODEL_TO_WORLD @ sw

    def _root_rotvec(self, ts, rate=False):
        r = self._root_rotation(ts)
        phi = _quat_to_rotvec(so3.matrix_to_quat(r))
        if not rate:
            return phi
        hd = self._heading(ts, rate=True)
        sd = self._pelvis_sway(ts, rate=True)
        # spatial angular velocity of V(h) U S(s): hd * up + sd * (R a)
        axis_s = np.einsum("nij,j->ni", r, self._pelvis_axis)
        omega = hd[:, None] * UP_WORLD + sd[:, None] * axis_s
        return np.einsum("nij,nj->ni", _left_jacobian_inv(phi), omega)

    # -- public interface ---------------------------------------------------

    def theta(self, ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        th = np.zeros((ts.size, self.tree.n_dofs))
        th[:, 0:3] = self._root_translation(ts)
        th[:, 3:6] = self._root_rotvec(ts)
        w = 2.0 * np.pi * self._f
        for d, (mean, comps) in enumerate(self._profiles):
            if d < 6:
                continue
            val = np.full(ts.size, mean)
            for mult, amp_deg, phase in comps:
                val += np.radians(amp_deg) * np.sin(w * mult * ts + phase)
            th[:, d] = val
        # pelvis rest offset is baked into the world path
        th[:, 0:3] -= (np.exp(self.beta.log_scales @ self.tree.scale_map[0])
                       * self.tree.rest_translations[0])
        return th

    def theta_with_rate(self, ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        th = self.theta(ts)
        thd = np.zeros_like(th)
        thd[:, 0:3] = self._root_translation(ts, rate=True)
        thd[:, 3:6] = self._root_rotvec(ts, rate=True)
        w = 2.0 * np.pi * self._f
        for d, (mean, comps) in enumerate(self._profiles):
            if d < 6:
                continue
            val = np.zeros(ts.size)
            for mult, amp_deg, phase in comps:
                val += np.radians(amp_deg) * w * mult * np.cos(w * mult * ts + phase)
            thd[:, d] = val
        return th, thd

    def camera_rot(self, ts, with_rate=False):
        c = self.config
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        x = c.start_x_m + c.walk_speed_m_s * self._walk_dir[0] * ts
        z = c.start_z_m + c.walk_speed_m_s * self._walk_dir[2] * ts
        psi = np.arctan2(x, z)
        wob = 2.0 * np.pi * c.camera_wobble_hz
        rho = np.radians(c.camera_tilt_deg) \
            + np.radians(c.camera_wobble_deg) * np.sin(wob * ts + 0.9)
        gam = np.radians(c.camera_roll_deg) * np.sin(wob * ts * 0.77 + 1.7)
        # pan about the vertical so +psi looks toward +x
        v = _rot_about(-UP_WORLD, psi)
        rx = _rot_about(np.array([1.0, 0.0, 0.0]), rho)
        rz = _rot_about(np.array([0.0, 0.0, 1.0]), gam)
        r = v @ rx @ rz
        if not with_rate:
            return r
        vx = c.walk_speed_m_s * self._walk_dir[0]
        vz = c.walk_speed_m_s * self._walk_dir[2]
        psi_d = (vx * z - vz * x) / (x * x + z * z)
        rho_d = np.radians(c.camera_wobble_deg) * wob * np.cos(wob * ts + 0.9)
        gam_d = np.radians(c.camera_roll_deg) * wob * 0.77 * np.cos(wob * ts * 0.77 + 1.7)
        ax1 = -UP_WORLD[None, :] * psi_d[:, None]
        ax2 = np.einsum("nij,j->ni", v, np.array([1.0, 0.0, 0.0])) * rho_d[:, None]
        ax3 = np.einsum("nij,j->ni", v @ rx, np.array([0.0, 0.0, 1.0])) * gam_d[:, None]
        omega_spatial = ax1 + ax2 + ax3
        rdot = so3.skew(omega_spatial) @ r
        return r, rdot


def true_calibration(config: ScenarioConfig) -> sensors.SensorCalibration:
    ids = [s["id"] for s in config.sensors]
    n = len(ids)
    rsb = np.zeros((n, 4))
    knots = np.zeros((n, 3, 4))
    deltas = np.zeros(n)
    for i, s in enumerate(config.sensors):
        rv = np.radians(np.asarray(s["rsb_rotvec_deg"], dtype=np.float64))
        rsb[i] = so3.rotvec_to_quat(rv)
        for k, yaw_deg in enumerate(s["drift_yaw_deg"]):
            knots[i, k] = so3.axis_angle_quat(UP_WORLD, np.radians(yaw_deg))
        deltas[i] = s.get("delta_s", 0.0)
    return sensors.SensorCalibration(ids, rsb, knots, deltas,
                                     float(config.phone_delta_s))


def generate_trajectory(config: ScenarioConfig,
                        tree: body.KinematicTree | None = None) -> GroundTruthModel:
    config.validate()
    tree = tree or body.default_tree()
    return GroundTruthModel(config, tree)


def _sample_grid(rate_hz: float, duration: float) -> np.ndarray:
    n = int(round(rate_hz * duration))
    return np.arange(n) / rate_hz


def occluded_marker_indices(config: ScenarioConfig, tree: body.KinematicTree):
    """Markers on the sensorized leg (the occlusion target)."""
    segs = {s["segment"] for s in config.sensors}
    # extend to the whole limb below the sensed segments
    limb = set()
    for i in range(tree.n_segments):
        j = i
        while j >= 0:
            if tree.segment_names[j] in segs:
                limb.add(i)
                break
            j = tree.parents[j]
    return np.array([m for m in range(tree.n_markers)
                     if tree.marker_segments[m] in limb], dtype=int)


def render_observations(truth: GroundTruthModel, config: ScenarioConfig
                        ) -> camera.KeypointFrames:
    """Keypoint frames at the video rate: camera-frame 3D points with
    isotropic noise, their projections, and per-keypoint sigma. The occlusion
    window zeroes confidence on the sensorized leg."""
    tree = truth.tree
    intr = camera.CameraIntrinsics.from_dict(config.intrinsics)
    ts = _sample_grid(config.keypoint_rate_hz, config.duration_s)
    markers = truth.markers(ts)                       # (F, M, 3) world
    cam = truth.camera_rot(ts)                        # (F, 3, 3)
    p_c = np.einsum("nji,nmj->nmi", cam, markers)     # R^T p
    rng = np.random.default_rng(_noise_seed(config, "keypoints"))
    sig = config.keypoint_sigma_mm
    if sig > 0:
        p_c = p_c + rng.normal(0.0, sig / 1000.0, size=p_c.shape)
    sigma = np.full(p_c.shape[:2], float(sig))
    behind = p_c[..., 2] <= camera.MIN_DEPTH
    zsafe = np.where(behind, 1.0, p_c[..., 2])
    x2d = np.stack(
        [intr.fx * p_c[..., 0] / zsafe + intr.cx,
         intr.fy * p_c[..., 1] / zsafe + intr.cy], axis=-1)
    if config.pixel_noise_px > 0:
        x2d = x2d + rng.normal(0.0, config.pixel_noise_px, size=x2d.shape)
    sigma[behind] = OCCLUDED_SIGMA_MM
    if config.occlusion is not None:
        a, b = config.occlusion
        frac = ts / config.duration_s
        window = (frac >= a) & (frac < b)
        occ = occluded_marker_indices(config, tree)
        sigma[np.ix_(window, occ)] = OCCLUDED_SIGMA_MM
    conf = camera.confidence_from_std(sigma)
    return camera.KeypointFrames(t=ts, p_cam=p_c, x2d=x2d, conf=conf,
                                 sigma_mm=sigma)


def simulate_imu(truth: GroundTruthModel, config: ScenarioConfig
                 ) -> tuple[list[sensors.SensorStream], sensors.PhoneGyroStream]:
    """IMU attitude/gyro streams and the phone gyro, stamped on device clocks
    shifted by the true time offsets."""
    tree = truth.tree
    cal = truth.calibration
    T = config.duration_s
    streams = []
    for i, spec in enumerate(config.sensors):
        seg = tree.segment_index(spec["segment"])
        delta = cal.imu_delta[i]
        rsb = so3.quat_to_matrix(cal.rsb[i])
        rng = np.random.default_rng(_noise_seed(config, f"imu:{spec['id']}"))

        att_tau = _sample_grid(config.attitude_rate_hz, T)
        t_att = att_tau + delta
        th = truth.theta(t_att)
        seg_rot = _segment_rot(truth, th, seg)
        drift = so3.piecewise_heading(cal.knots[i, 0], cal.knots[i, 1],
                                      cal.knots[i, 2], t_att, T)
        r_ns = np.swapaxes(drift, -1, -2) @ seg_rot @ np.swapaxes(rsb, -1, -2)
        if config.attitude_noise_deg > 0:
            r_ns = _perturb(r_ns, np.radians(config.attitude_noise_deg), rng)
        att_q = so3.matrix_to_quat(r_ns)

        gyro_tau = _sample_grid(config.gyro_rate_hz, T)
        t_gyro = gyro_tau + delta
        thg, thdg = truth.theta_with_rate(t_gyro)
        rot, rotd = body.fk_time_derivative(tree, truth.beta, thg, thdg)
        w = sensors.predicted_sensor_gyro(rsb, rot[:, seg], rotd[:, seg])
        if config.gyro_noise_rad_s > 0:
            w = w + rng.normal(0.0, config.gyro_noise_rad_s, size=w.shape)

        streams.append(sensors.SensorStream(
            sensor_id=spec["id"], segment=spec["segment"],
            att_t=att_tau, att_q=att_q, gyro_t=gyro_tau, gyro_w=np.asarray(w),
            att_rate_hz=config.attitude_rate_hz,
            gyro_rate_hz=config.gyro_rate_hz,
        ))

    phone_tau = _sample_grid(config.phone_gyro_rate_hz, T)
    t_phone = phone_tau + cal.phone_delta
    cam, camd = truth.camera_rot(t_phone, with_rate=True)
    w_c = sensors.predicted_phone_gyro(cam, camd)
    rng = np.random.default_rng(_noise_seed(config, "phone"))
    if config.gyro_noise_rad_s > 0:
        w_c = w_c + rng.normal(0.0, config.gyro_noise_rad_s, size=w_c.shape)
    phone = sensors.PhoneGyroStream(t=phone_tau, w=np.asarray(w_c),
                                    rate_hz=config.phone_gyro_rate_hz)
    return streams, phone


def _segment_rot(truth, th, seg):
    out = body.forward_kinematics(truth.tree, truth.beta, th)
    return out.seg_rot[:, seg]


def _perturb(r, sigma_rad, rng):
    axes = rng.normal(size=r.shape[:-2] + (3,))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    angles = rng.normal(0.0, sigma_rad, size=r.shape[:-2])
    return _rot_about_batch(axes, angles) @ r


def _rot_about_batch(axes, angles):
    k = so3.skew(axes)
    s = np.sin(angles)[..., None, None]
    c1 = (1.0 - np.cos(angles))[..., None, None]
    return np.eye(3) + s * k + c1 * (k @ k)


def _noise_seed(config: ScenarioConfig, stream: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(f"{config.seed}:{stream}".encode()).digest()
    return np.random.SeedSequence(int.from_bytes(digest[:8], "little"))


def build_recording(config: ScenarioConfig,
                    tree: body.KinematicTree | None = None) -> rec_mod.Recording:
    """In-memory synthetic recording (no files)."""
    truth = generate_trajectory(config, tree)
    frames = render_observations(truth, config)
    streams, phone = simulate_imu(truth, config)
    return rec_mod.Recording(
        duration=config.duration_s,
        intrinsics=camera.CameraIntrinsics.from_dict(config.intrinsics),
        keypoints=frames,
        sensor_streams=streams,
        phone=phone,
        descriptor=truth.tree.descriptor,
        scenario_hash=config.scenario_hash(),
    )


def write_recording(config: ScenarioConfig, outdir,
                    tree: body.KinematicTree | None = None) -> dict:
    """Simulate and write a full recording: manifest, streams, model
    descriptor, and the ground-truth sidecar. Returns summary stats."""
    config.validate()
    os.makedirs(outdir, exist_ok=True)
    truth = generate_trajectory(config, tree)
    frames = render_observations(truth, config)
    streams, phone = simulate_imu(truth, config)

    camera.save_keypoints(os.path.join(outdir, "keypoints.jsonl"), frames)
    sensor_files = []
    for s in streams:
        fname = f"{s.sensor_id}.jsonl"
        sensors.save_sensor_stream(os.path.join(outdir, fname), s)
        sensor_files.append(fname)
    sensors.save_phone_gyro(os.path.join(outdir, "phone_gyro.jsonl"), phone)

    descriptor_file = "model.json"
    with open(os.path.join(outdir, descriptor_file), "w") as fh:
        json.dump(truth.tree.descriptor, fh, indent=2, sort_keys=True)
        fh.write("\n")

    shash = config.scenario_hash()
    rec_mod.write_manifest(
        outdir,
        duration=config.duration_s,
        intrinsics=camera.CameraIntrinsics.from_dict(config.intrinsics),
        keypoint_file="keypoints.jsonl",
        sensor_files=sensor_files,
        phone_file="phone_gyro.jsonl",
        descriptor_file=descriptor_file,
        scenario_hash=shash,
        nominal_rates={
            "keypoint_hz": config.keypoint_rate_hz,
            "attitude_hz": config.attitude_rate_hz,
            "gyro_hz": config.gyro_rate_hz,
            "phone_gyro_hz": config.phone_gyro_rate_hz,
        },
    )
    with open(os.path.join(outdir, TRUTH_NAME), "w") as fh:
        json.dump({"schema": TRUTH_SCHEMA, "scenario_hash": shash,
                   "scenario": config.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "frames": frames.n_frames,
        "attitude_samples": [s.att_t.size for s in streams],
        "gyro_samples": [s.gyro_t.size for s in streams],
        "phone_samples": phone.t.size,
        "scenario_hash": shash,
    }


def load_truth(path) -> tuple[ScenarioConfig, str]:
    """Read a ground-truth sidecar; returns (scenario config, hash)."""
    with open(path) as fh:
        data = json.load(fh)
    if data.get("schema") != TRUTH_SCHEMA:
        raise ScenarioError(f"not a ground-truth sidecar: {path}")
    cfg = ScenarioConfig.from_dict(data["scenario"])
    if cfg.scenario_hash() != data.get("scenario_hash"):
        raise ScenarioError("ground-truth sidecar hash mismatch")
    return cfg, data["scenario_hash"]
