"""Recording manifest and the in-memory container the optimizer consumes.

A recording on disk is a manifest JSON next to its stream files: keypoints
(JSON-lines), one file per IMU, a phone-gyro file, camera intrinsics, the
model descriptor, and the recording duration. Synthetic recordings also
carry a scenario hash so fits and reports can refuse cross-scenario
comparisons.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import body, camera, sensors

MANIFEST_SCHEMA = "kinefuse-recording/1"
MANIFEST_NAME = "manifest.json"
DURATION_SLACK = 0.5  # s


class RecordingError(ValueError):
    """Manifest or stream inconsistency."""


@dataclass
class Recording:
    duration: float
    intrinsics: camera.CameraIntrinsics
    keypoints: camera.KeypointFrames
    sensor_streams: list[sensors.SensorStream] = field(default_factory=list)
    phone: sensors.PhoneGyroStream | None = None
    descriptor: dict | None = None
    scenario_hash: str | None = None
    manifest_dir: str | None = None

    @property
    def sensor_ids(self) -> list[str]:
        return [s.sensor_id for s in self.sensor_streams]

    def tree(self) -> body.KinematicTree:
        if self.descriptor is None:
            raise RecordingError("recording carries no model descriptor")
        return body.build_tree(self.descriptor)


def write_manifest(outdir, *, duration, intrinsics, keypoint_file, sensor_files,
                   phone_file, descriptor_file, scenario_hash=None,
                   nominal_rates=None) -> str:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "duration_s": float(duration),
        "intrinsics": intrinsics.to_dict(),
        "keypoints": keypoint_file,
        "sensors": list(sensor_files),
        "phone_gyro": phone_file,
        "model_descriptor": descriptor_file,
    }
    if scenario_hash is not None:
        manifest["scenario_hash"] = scenario_hash
    if nominal_rates is not None:
        manifest["nominal_rates"] = nominal_rates
    path = os.path.join(outdir, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_recording(manifest_path, mode: str = "fusion") -> Recording:
    """Load and validate a recording. ``mode='video'`` skips sensor files
    even when the manifest lists them."""
    if mode not in ("fusion", "video"):
        raise RecordingError(f"unknown mode {mode!r}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise RecordingError(f"unsupported manifest schema {manifest.get('schema')!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(rel):
        p = os.path.join(base, rel)
        if not os.path.exists(p):
            raise RecordingError(f"manifest references missing file: {rel}")
        return p

    for key in ("duration_s", "intrinsics", "keypoints", "model_descriptor"):
        if key not in manifest:
            raise RecordingError(f"manifest missing field {key!r}")
    duration = float(manifest["duration_s"])
    intr = camera.CameraIntrinsics.from_dict(manifest["intrinsics"])
    frames = camera.load_keypoints(resolve(manifest["keypoints"]))
    descriptor = body.load_descriptor(resolve(manifest["model_descriptor"]))
    body.build_tree(descriptor)  # parse check

    _check_extent("keypoints", frames.t, duration)

    streams: list[sensors.SensorStream] = []
    phone = None
    if mode == "fusion":
        for rel in manifest.get("sensors", []):
            s = sensors.load_sensor_stream(resolve(rel))
            _check_extent(f"sensor {s.sensor_id} attitude", s.att_t, duration)
            _check_extent(f"sensor {s.sensor_id} gyro", s.gyro_t, duration)
            streams.append(s)
        rel = manifest.get("phone_gyro")
        if rel:
            phone = sensors.load_phone_gyro(resolve(rel))
            _check_extent("phone gyro", phone.t, duration)

    return Recording(
        duration=duration,
        intrinsics=intr,
        keypoints=frames,
        sensor_streams=streams,
        phone=phone,
        descriptor=descriptor,
        scenario_hash=manifest.get("scenario_hash"),
        manifest_dir=base,
    )


def _check_extent(name, t, duration):
    if t.size == 0:
        raise RecordingError(f"{name}: empty stream")
    if t[-1] > duration + DURATION_SLACK or t[-1] < duration - DURATION_SLACK:
        raise RecordingError(
            f"{name}: extent {t[-1]:.3f} s inconsistent with duration "
            f"{duration:.3f} s (slack {DURATION_SLACK} s)"
        )
    if t[0] < -DURATION_SLACK:
        raise RecordingError(f"{name}: starts before the recording window")
