"""Pinhole camera, keypoint containers, confidence handling, and the
centering used by the 3D keypoint loss.

Keypoint files are JSON-lines, one frame per line, holding camera-frame 3D
keypoints in meters, 2D pixel keypoints, and the per-keypoint detection
spread in millimeters. Confidence is derived from that spread by a
descending sigmoid with half maximum at 30 mm and width 10 mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

MIN_DEPTH = 1e-6  # m; points at or behind this leave the reprojection loss

CONF_HALF_MAX_MM = 30.0
CONF_WIDTH_MM = 10.0


class CameraError(ValueError):
    """Invalid intrinsics or keypoint data."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise CameraError("principal point outside image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                       cy=float(d["cy"]), width=int(d["width"]),
                       height=int(d["height"]))
        except KeyError as e:
            raise CameraError(f"intrinsics missing field {e.args[0]!r}") from None


@dataclass
class KeypointFrames:
    """Batched keypoint observations: one entry per video frame."""

    t: np.ndarray          # (F,) s
    p_cam: np.ndarray      # (F, M, 3) m, camera frame
    x2d: np.ndarray        # (F, M, 2) px
    conf: np.ndarray       # (F, M) in [0, 1]
    sigma_mm: np.ndarray   # (F, M)

    def __post_init__(self):
        if np.any(self.conf < 0) or np.any(self.conf > 1):
            raise CameraError("confidences must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.t.shape[0]

    @property
    def n_markers(self) -> int:
        return self.p_cam.shape[1]


def project(intr: CameraIntrinsics, p):
    """Pinhole projection of camera-frame points (..., 3) -> (..., 2) px.

    The caller is responsible for masking out points with depth below
    ``MIN_DEPTH``; on the plain-array path they raise.
    """
    z = p[..., 2]
    if not isinstance(p, Tensor) and np.any(tape.value_of(z) <= MIN_DEPTH):
        raise CameraError("point at or behind the camera plane")
    u = intr.fx * (p[..., 0] / z) + intr.cx
    v = intr.fy * (p[..., 1] / z) + intr.cy
    return tape.stack([u, v], axis=-1)


def project_masked(intr: CameraIntrinsics, p):
    """Projection plus a validity mask; invalid depths are projected at a
    clamped depth so gradients stay finite but must be masked out of any
    loss. Returns ``(pixels, valid_mask)``."""
    z = tape.value_of(p)[..., 2]
    valid = z > MIN_DEPTH
    zsafe = tape.where(valid, p[..., 2], np.maximum(z, MIN_DEPTH))
    u = intr.fx * (p[..., 0] / zsafe) + intr.cx
    v = intr.fy * (p[..., 1] / zsafe) + intr.cy
    return tape.stack([u, v], axis=-1), valid


def confidence_from_std(sigma_mm):
    """Detection spread (mm) -> confidence in [0, 1]; 0.5 at 30 mm.

    Evaluated in the overflow-free form so huge spreads (occlusion markers)
    come out as exact zeros.
    """
    sigma_mm = np.asarray(sigma_mm, dtype=np.float64)
    if np.any(sigma_mm < 0):
        raise CameraError("sigma must be nonnegative")
    x = (sigma_mm - CONF_HALF_MAX_MM) / CONF_WIDTH_MM
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))


def center_keypoints(p, conf=None, weighted=True):
    """Remove the (confidence-weighted) mean translation of a keypoint set.

    ``p`` is (..., M, 3); ``conf`` is (..., M). The same weights must be
    applied to the model set and the detected set so the two remain
    comparable. Frames whose weights sum to zero are the caller's problem;
    here they raise on the plain-array path.
    """
    if conf is None or not weighted:
        m = tape.tmean(p, axis=-2, keepdims=True)
        return p - m
    wsum = tape.tsum(conf, axis=-1, keepdims=True)
    if not isinstance(wsum, Tensor) and np.any(tape.value_of(wsum) <= 0):
        raise CameraError("all confidences zero: frame has no usable keypoints")
    w = conf / wsum
    m = tape.tsum(_expand(w) * p, axis=-2, keepdims=True)
    return p - m


def _expand(w):
    return tape.reshape(w, (w.shape if isinstance(w, Tensor) else np.shape(w)) + (1,))


# -- keypoint file I/O --------------------------------------------------------


def save_keypoints(path, frames: KeypointFrames) -> None:
    with open(path, "w") as fh:
        for i in range(frames.n_frames):
            rec = {
                "t": float(frames.t[i]),
                "p_c": [[float(v) for v in row] for row in frames.p_cam[i]],
                "x2d": [[float(v) for v in row] for row in frames.x2d[i]],
                "sigma_mm": [float(v) for v in frames.sigma_mm[i]],
            }
            fh.write(json.dumps(rec) + "\n")


def load_keypoints(path) -> KeypointFrames:
    t, p, x, s = [], [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            t.append(rec["t"])
            p.append(rec["p_c"])
            x.append(rec["x2d"])
            s.append(rec["sigma_mm"])
    if not t:
        raise CameraError(f"{path}: no keypoint frames")
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return KeypointFrames(t=t, p_cam=p, x2d=x, conf=confidence_from_std(s),
                          sigma_mm=s)
