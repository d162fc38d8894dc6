"""Uncalibrated wearable-sensor models: streams, learned calibrations,
heading drift, time offsets, and predicted readings.

An IMU reports attitude in its own home frame, which both starts at an
unknown heading and drifts slowly. The calibration for sensor ``i`` is a
fixed sensor-to-segment rotation plus three drift-knot quaternions that are
piecewise-SLERP-interpolated over the recording, and a per-device time
offset mapping device timestamps onto the recording clock. Everything is a
free optimization parameter; nothing is measured in advance.

Predicted readings compose model quantities with the calibration:

    attitude:      drift(t) @ reading @ R_sb          ~= segment orientation
    sensor gyro:   vee(R_sb^-1 (R^-1 Rdot) R_sb)      body rate seen by the IMU
    phone gyro:    vee(R_nc^-1 Rdot_nc)               camera body rate

Stream files are JSON-lines: a header line carrying the sensor-to-segment
assignment and nominal rates, then one sample per line with quaternion
attitude or rad/s gyro data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import so3, tape
from .tape import Tensor

MAX_TIME_OFFSET = 0.5  # s


class StreamError(ValueError):
    """Malformed or inconsistent sensor stream data."""


@dataclass
class SensorStream:
    sensor_id: str
    segment: str
    att_t: np.ndarray        # (Na,) s, device clock
    att_q: np.ndarray        # (Na, 4) unit quaternions
    gyro_t: np.ndarray       # (Ng,) s
    gyro_w: np.ndarray       # (Ng, 3) rad/s
    att_rate_hz: float = 55.0
    gyro_rate_hz: float = 562.5

    def __post_init__(self):
        for name, t in (("attitude", self.att_t), ("gyro", self.gyro_t)):
            if t.size > 1 and not np.all(np.diff(t) > 0):
                raise StreamError(
                    f"{self.sensor_id}: {name} timestamps not strictly increasing"
                )
        if self.att_q.size:
            n = np.linalg.norm(self.att_q, axis=-1)
            if np.any(np.abs(n - 1.0) > so3.RENORM_TOL):
                raise StreamError(f"{self.sensor_id}: non-unit attitude quaternion")

    def att_matrices(self) -> np.ndarray:
        return so3.quat_to_matrix(self.att_q)


@dataclass
class PhoneGyroStream:
    t: np.ndarray            # (N,) s
    w: np.ndarray            # (N, 3) rad/s
    rate_hz: float = 100.0

    def __post_init__(self):
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0):
            raise StreamError("phone gyro timestamps not strictly increasing")


@dataclass
class SensorCalibration:
    """Learned per-sensor alignment and per-device clock offsets.

    ``rsb`` holds one quaternion per sensor (sensor-to-segment), ``knots``
    three drift quaternions per sensor, ``imu_delta`` one time offset per
    IMU, and ``phone_delta`` the phone clock offset (all seconds added to
    device timestamps to reach the recording clock).
    """

    sensor_ids: list[str]
    rsb: np.ndarray          # (n_s, 4)
    knots: np.ndarray        # (n_s, 3, 4)
    imu_delta: np.ndarray    # (n_s,)
    phone_delta: float = 0.0

    @classmethod
    def identity(cls, sensor_ids) -> "SensorCalibration":
        n = len(sensor_ids)
        rsb = np.tile(so3.IDENTITY_QUAT, (n, 1))
        knots = np.tile(so3.IDENTITY_QUAT, (n, 3, 1))
        return cls(list(sensor_ids), rsb, knots, np.zeros(n), 0.0)

    def validate(self) -> None:
        if np.any(np.abs(np.linalg.norm(self.rsb, axis=-1) - 1.0) > so3.RENORM_TOL):
            raise StreamError("non-unit sensor alignment quaternion")
        if np.any(np.abs(np.linalg.norm(self.knots, axis=-1) - 1.0) > so3.RENORM_TOL):
            raise StreamError("non-unit drift knot quaternion")
        deltas = np.append(self.imu_delta, self.phone_delta)
        if np.any(np.abs(deltas) > MAX_TIME_OFFSET):
            raise StreamError(f"time offset exceeds |{MAX_TIME_OFFSET}| s")

    def index(self, sensor_id: str) -> int:
        return self.sensor_ids.index(sensor_id)


# -- predictions -------------------------------------------------------------


def predicted_attitude(drift, reading, rsb):
    """Sensor's claim about its segment's global orientation.

    ``drift`` is the heading rotation at the (offset-resolved) sample time,
    ``reading`` the measured attitude matrix, ``rsb`` the alignment matrix.
    All arguments broadcast; Tensors allowed.
    """
    return tape.matmul(tape.matmul(drift, reading), rsb)


def predicted_sensor_gyro(rsb, seg_rot, seg_rot_dot):
    """Body rate conjugated into the sensor frame.

    ``seg_rot``/``seg_rot_dot`` come from the kinematic chain. The body-frame
    product is symmetrized to skew form before reading off the vector.
    """
    m = tape.matmul(tape.transpose_last2(seg_rot), seg_rot_dot)
    m = tape.matmul(tape.matmul(tape.transpose_last2(rsb), m), rsb)
    skw = 0.5 * (m - tape.transpose_last2(m))
    return so3.vee(skw)


def predicted_phone_gyro(cam_rot, cam_rot_dot):
    """Camera body rate from the trajectory head and its time derivative."""
    m = tape.matmul(tape.transpose_last2(cam_rot), cam_rot_dot)
    skw = 0.5 * (m - tape.transpose_last2(m))
    return so3.vee(skw)


def resolve_time(stream_t, delta):
    """Recording-clock time of device-stamped samples: ``t + delta``."""
    return stream_t + delta


def usable_sample_mask(stream_t, delta, duration):
    """Samples whose offset-resolved time lies within the padded recording
    window; others are excluded from batches."""
    t = np.asarray(stream_t, dtype=np.float64) + float(tape.value_of(delta))
    return (t >= -MAX_TIME_OFFSET) & (t <= duration + MAX_TIME_OFFSET)


def drift_matrices(knots, t, T):
    """Heading-drift rotations at recording times ``t`` for one sensor's
    (3, 4) knot stack. Tensor-friendly."""
    return so3.heading_graph(knots, t, T)


# -- stream file I/O ---------------------------------------------------------


def save_sensor_stream(path, stream: SensorStream) -> None:
    with open(path, "w") as fh:
        header = {
            "stream_id": stream.sensor_id,
            "segment": stream.segment,
            "att_rate_hz": stream.att_rate_hz,
            "gyro_rate_hz": stream.gyro_rate_hz,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t, q in zip(stream.att_t, stream.att_q):
            fh.write(json.dumps(
                {"stream_id": stream.sensor_id, "channel": "att",
                 "t": float(t), "data": [float(v) for v in q]}) + "\n")
        for t, w in zip(stream.gyro_t, stream.gyro_w):
            fh.write(json.dumps(
                {"stream_id": stream.sensor_id, "channel": "gyro",
                 "t": float(t), "data": [float(v) for v in w]}) + "\n")


def load_sensor_stream(path) -> SensorStream:
    with open(path) as fh:
        first = fh.readline()
        if not first:
            raise StreamError(f"{path}: empty stream file")
        header = json.loads(first)
        for key in ("stream_id", "segment"):
            if key not in header:
                raise StreamError(f"{path}: header missing {key!r}")
        att_t, att_q, gyro_t, gyro_w = [], [], [], []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ch = rec.get("channel")
            if ch == "att":
                att_t.append(rec["t"])
                att_q.append(rec["data"])
            elif ch == "gyro":
                gyro_t.append(rec["t"])
                gyro_w.append(rec["data"])
            else:
                raise StreamError(f"{path}: unknown channel {ch!r}")
    return SensorStream(
        sensor_id=header["stream_id"],
        segment=header["segment"],
        att_t=np.asarray(att_t, dtype=np.float64),
        att_q=np.asarray(att_q, dtype=np.float64).reshape(-1, 4),
        gyro_t=np.asarray(gyro_t, dtype=np.float64),
        gyro_w=np.asarray(gyro_w, dtype=np.float64).reshape(-1, 3),
        att_rate_hz=float(header.get("att_rate_hz", 55.0)),
        gyro_rate_hz=float(header.get("gyro_rate_hz", 562.5)),
    )


def save_phone_gyro(path, stream: PhoneGyroStream) -> None:
    with open(path, "w") as fh:
        header = {"stream_id": "phone", "rate_hz": stream.rate_hz}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t, w in zip(stream.t, stream.w):
            fh.write(json.dumps(
                {"stream_id": "phone", "channel": "phone_gyro",
                 "t": float(t), "data": [float(v) for v in w]}) + "\n")


def load_phone_gyro(path) -> PhoneGyroStream:
    with open(path) as fh:
        first = fh.readline()
        if not first:
            raise StreamError(f"{path}: empty stream file")
        header = json.loads(first)
        t, w = [], []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("channel") != "phone_gyro":
                raise StreamError(f"{path}: unexpected channel in phone stream")
            t.append(rec["t"])
            w.append(rec["data"])
    return PhoneGyroStream(
        t=np.asarray(t, dtype=np.float64),
        w=np.asarray(w, dtype=np.float64).reshape(-1, 3),
        rate_hz=float(header.get("rate_hz", 100.0)),
    )
