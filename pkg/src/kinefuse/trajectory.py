"""Implicit trajectory function: recording time -> (pose vector, camera
orientation), with exact time derivatives of every output.

The function is a small multi-layer perceptron over a sinusoidal time
encoding. Weights live in one flat vector so the optimizer can treat the
whole function as a single parameter group; a layer map recovers the
matrices. The camera orientation head emits six numbers that are
orthonormalized into a rotation matrix (two columns via Gram-Schmidt, third
by cross product), a parameterization with no discontinuities to trip
gradient descent.

tanh is used throughout: the loss differentiates the *time derivative* of
the outputs, so the activation must be smooth to any order.

Time derivatives are propagated alongside values (dual-number style product
rule), and both paths are built from :mod:`~kinefuse.tape` operations, so the
derivative outputs themselves remain differentiable with respect to the
weights and the time input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import binio, tape
from .tape import Tensor

CAMERA_HEAD = 6


@dataclass(frozen=True)
class TrajectoryConfig:
    n_pose: int
    hidden_layers: int = 3
    hidden_width: int = 96
    frequency_bands: int = 8
    include_linear: bool = True
    out_scale: float = 5e-3

    @property
    def in_dim(self) -> int:
        return 2 * self.frequency_bands + (1 if self.include_linear else 0)

    @property
    def out_dim(self) -> int:
        return self.n_pose + CAMERA_HEAD

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        dims = [self.in_dim] + [self.hidden_width] * self.hidden_layers + [self.out_dim]
        return [((dims[i], dims[i + 1]), (dims[i + 1],)) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(w[0] * w[1] + b[0] for w, b in self.layer_shapes())


@dataclass
class TrajectoryParams:
    values: np.ndarray
    config: TrajectoryConfig

    def copy(self) -> "TrajectoryParams":
        return TrajectoryParams(self.values.copy(), self.config)


@dataclass
class NetOutput:
    theta: object                 # (..., n_pose)
    camera: object                # (..., 3, 3)
    theta_dot: object = None
    camera_dot: object = None


def init_trajectory(seed: int, config: TrajectoryConfig) -> TrajectoryParams:
    """Deterministic initialization.

    Hidden layers use Glorot-scaled normals; the output layer is drawn small
    so the initial pose is near neutral, and the camera head bias encodes the
    identity rotation.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    shapes = config.layer_shapes()
    last = len(shapes) - 1
    for i, (wshape, bshape) in enumerate(shapes):
        fan_in, fan_out = wshape
        if i == last:
            w = rng.normal(0.0, config.out_scale / np.sqrt(fan_in), size=wshape)
            b = np.zeros(bshape)
            b[config.n_pose : config.n_pose + 3] = (1.0, 0.0, 0.0)
            b[config.n_pose + 3 : config.n_pose + 6] = (0.0, 1.0, 0.0)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=wshape)
            b = np.zeros(bshape)
        chunks += [w.ravel(), b.ravel()]
    return TrajectoryParams(np.concatenate(chunks), config)


def _layers(flat, config):
    out = []
    k = 0
    for wshape, bshape in config.layer_shapes():
        n = wshape[0] * wshape[1]
        w = tape.reshape(flat[k : k + n], wshape)
        k += n
        b = flat[k : k + bshape[0]]
        k += bshape[0]
        out.append((w, b))
    return out


def encode_time(t, T, config, with_rate=False):
    """Sinusoidal features of normalized time; base period is the recording
    length so frequencies are length-invariant."""
    tn = t * (1.0 / T)
    cols = []
    rates = []
    if config.include_linear:
        cols.append(2.0 * tn - 1.0)
        if with_rate:
            rates.append(np.full(_shape(t), 2.0 / T))
    for k in range(config.frequency_bands):
        w = 2.0 * np.pi * (2.0**k)
        ang = w * tn
        s, c = tape.sin(ang), tape.cos(ang)
        cols += [s, c]
        if with_rate:
            rates += [c * (w / T), s * (-w / T)]
    feats = tape.stack(cols, axis=-1)
    if not with_rate:
        return feats, None
    return feats, tape.stack(rates, axis=-1)


def _shape(x):
    return x.shape if isinstance(x, Tensor) else np.shape(x)


def trajectory_raw(flat, t, T, config, with_rate=False):
    """Network outputs before the rotation head is orthonormalized:
    ``(theta, head[, theta_dot, head_dot])``. Lets batched callers
    orthonormalize only the rows whose camera they actually use."""
    layers = _layers(flat, config)
    a, adot = encode_time(t, T, config, with_rate=with_rate)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = tape.matmul(a, w) + b
        if with_rate:
            zdot = tape.matmul(adot, w)
        if i == last:
            a, adot = z, (zdot if with_rate else None)
            break
        a = tape.tanh(z)
        if with_rate:
            adot = (1.0 - a * a) * zdot
    theta = a[..., : config.n_pose]
    head = a[..., config.n_pose :]
    if with_rate:
        return theta, head, adot[..., : config.n_pose], adot[..., config.n_pose :]
    return theta, head, None, None


def trajectory_forward(flat, t, T, config, with_rate=False):
    """Evaluate the network (and optionally its time derivative) at times
    ``t``. ``flat`` and ``t`` may each be Tensors."""
    theta, head, theta_dot, head_dot = trajectory_raw(flat, t, T, config,
                                                      with_rate=with_rate)
    if with_rate:
        cam, cam_dot = orthonormalize_head_with_rate(head, head_dot)
        return NetOutput(theta, cam, theta_dot, cam_dot)
    return NetOutput(theta, orthonormalize_head(head))


def eval_trajectory(params: TrajectoryParams, t, T) -> NetOutput:
    """Value-path evaluation at scalar or vector times."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite evaluation time")
    if T <= 0:
        raise ValueError("recording length T must be positive")
    return trajectory_forward(params.values, t, T, params.config)


def eval_with_time_derivative(params: TrajectoryParams, t, T) -> NetOutput:
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite evaluation time")
    if T <= 0:
        raise ValueError("recording length T must be positive")
    return trajectory_forward(params.values, t, T, params.config, with_rate=True)


# -- rotation head ----------------------------------------------------------


def _norm(v):
    return tape.sqrt(tape.tsum(v * v, axis=-1, keepdims=True) + 1e-30)


def _cross(u, v):
    return tape.stack(
        [
            u[..., 1] * v[..., 2] - u[..., 2] * v[..., 1],
            u[..., 2] * v[..., 0] - u[..., 0] * v[..., 2],
            u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0],
        ],
        axis=-1,
    )


def orthonormalize_head(h):
    """Six reals -> rotation matrix whose first two columns are the
    Gram-Schmidt frame of the two 3-vectors. Exact when the input already
    holds two columns of a rotation."""
    a = h[..., 0:3]
    b = h[..., 3:6]
    v1 = a / _norm(a)
    d = tape.tsum(v1 * b, axis=-1, keepdims=True)
    b2 = b - d * v1
    v2 = b2 / _norm(b2)
    v3 = _cross(v1, v2)
    return tape.stack([v1, v2, v3], axis=-1)


def orthonormalize_head_with_rate(h, hdot):
    a, b = h[..., 0:3], h[..., 3:6]
    ad, bd = hdot[..., 0:3], hdot[..., 3:6]
    na = _norm(a)
    v1 = a / na
    nad = tape.tsum(v1 * ad, axis=-1, keepdims=True)   # d|a|/dt
    v1d = (ad - v1 * nad) / na
    d = tape.tsum(v1 * b, axis=-1, keepdims=True)
    dd = tape.tsum(v1d * b + v1 * bd, axis=-1, keepdims=True)
    b2 = b - d * v1
    b2d = bd - dd * v1 - d * v1d
    nb = _norm(b2)
    nbd = tape.tsum((b2 / nb) * b2d, axis=-1, keepdims=True)
    v2 = b2 / nb
    v2d = (b2d - v2 * nbd) / nb
    v3 = _cross(v1, v2)
    v3d = _cross(v1d, v2) + _cross(v1, v2d)
    r = tape.stack([v1, v2, v3], axis=-1)
    rd = tape.stack([v1d, v2d, v3d], axis=-1)
    return r, rd


# -- checkpointing ----------------------------------------------------------


def save_params(path, params: TrajectoryParams, tree_hash: str,
                extra_meta: dict | None = None,
                extra_arrays: dict | None = None) -> None:
    meta = {
        "kind": "trajectory",
        "config": asdict(params.config),
        "tree_hash": tree_hash,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {"phi": params.values}
    if extra_arrays:
        arrays.update(extra_arrays)
    binio.save_arrays(path, meta, arrays)


def load_params(path) -> tuple[TrajectoryParams, dict, dict]:
    """Returns (params, meta, remaining arrays)."""
    meta, arrays = binio.load_arrays(path)
    cfg = TrajectoryConfig(**meta["config"])
    phi = arrays.pop("phi")
    if phi.shape != (cfg.n_params,):
        raise binio.FormatError("checkpoint parameter count mismatch")
    return TrajectoryParams(phi, cfg), meta, arrays
