"""Rotation algebra: unit quaternions, rotation matrices, SLERP, geodesic
distance, and the body-frame angular-velocity identity.

Quaternions are scalar-first ``(w, x, y, z)`` arrays; a trailing axis of 4.
Matrices are row-major with a trailing ``(3, 3)``. Most functions accept a
leading batch dimension. Angles are radians throughout; file formats and
reports convert to degrees at their own boundary.

``quat_to_matrix`` also accepts a :class:`~kinefuse.tape.Tensor`, in which
case the conversion is recorded for differentiation (validation is skipped:
the normalized form is exact for any nonzero quaternion).
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tape
from .tape import Tensor

UNIT_TOL = 1e-6           # accepted silently
RENORM_TOL = 1e-3         # silently renormalized up to here, rejected above

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class RotationError(ValueError):
    """Input fails a rotation-validity requirement."""


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise RotationError("cannot normalize a near-zero quaternion")
    return q / n


def canonicalize_quat(q):
    """Pick the w >= 0 representative of the (q, -q) pair."""
    q = normalize_quat(q)
    flip = q[..., 0] < 0.0
    return np.where(flip[..., None], -q, q)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion; ``q`` and ``-q`` map identically.

    ndarray inputs are validated: deviations of ``|q|`` from 1 beyond
    ``UNIT_TOL`` are renormalized silently up to ``RENORM_TOL`` and rejected
    above it. Tensor inputs skip validation and use the norm-invariant form.
    """
    if isinstance(q, Tensor):
        return _quat_to_matrix_graph(q)
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    dev = np.abs(n - 1.0)
    if np.any(dev > RENORM_TOL):
        raise RotationError(
            f"quaternion norm deviates from 1 by {float(np.max(dev)):.2e} "
            f"(limit {RENORM_TOL:g})"
        )
    q = q / n[..., None]
    return _quat_to_matrix_graph(q)


def _quat_to_matrix_graph(q):
    # normalized by |q|^2 so any nonzero quaternion yields a proper rotation;
    # this keeps the map smooth for unconstrained optimization parameters
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    s = w * w + x * x + y * y + z * z
    ww, xx, yy, zz = w * w, x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    rows = [
        tape.stack([ww + xx - yy - zz, 2 * (xy - wz), 2 * (xz + wy)], axis=-1),
        tape.stack([2 * (xy + wz), ww - xx + yy - zz, 2 * (yz - wx)], axis=-1),
        tape.stack([2 * (xz - wy), 2 * (yz + wx), ww - xx - yy + zz], axis=-1),
    ]
    m = tape.stack(rows, axis=-2)
    if isinstance(m, Tensor):
        return m / tape.reshape(s, s.shape + (1, 1))
    return m / s[..., None, None]


def matrix_to_quat(r):
    """Inverse of :func:`quat_to_matrix` via Shepperd's method; returns the
    canonical (w >= 0) representative."""
    r = np.asarray(r, dtype=np.float64)
    batch = r.shape[:-2]
    r = r.reshape((-1, 3, 3))
    tr = np.trace(r, axis1=-2, axis2=-1)
    q = np.empty((r.shape[0], 4))
    d0 = 1.0 + tr
    d1 = 1.0 + 2.0 * r[:, 0, 0] - tr
    d2 = 1.0 + 2.0 * r[:, 1, 1] - tr
    d3 = 1.0 + 2.0 * r[:, 2, 2] - tr
    choice = np.argmax(np.stack([d0, d1, d2, d3], axis=-1), axis=-1)
    for i in range(r.shape[0]):
        m = r[i]
        c = choice[i]
        if c == 0:
            w = 0.5 * np.sqrt(d0[i])
            s = 0.25 / w
            q[i] = (w, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s,
                    (m[1, 0] - m[0, 1]) * s)
        elif c == 1:
            x = 0.5 * np.sqrt(d1[i])
            s = 0.25 / x
            q[i] = ((m[2, 1] - m[1, 2]) * s, x, (m[0, 1] + m[1, 0]) * s,
                    (m[0, 2] + m[2, 0]) * s)
        elif c == 2:
            y = 0.5 * np.sqrt(d2[i])
            s = 0.25 / y
            q[i] = ((m[0, 2] - m[2, 0]) * s, (m[0, 1] + m[1, 0]) * s, y,
                    (m[1, 2] + m[2, 1]) * s)
        else:
            z = 0.5 * np.sqrt(d3[i])
            s = 0.25 / z
            q[i] = ((m[1, 0] - m[0, 1]) * s, (m[0, 2] + m[2, 0]) * s,
                    (m[1, 2] + m[2, 1]) * s, z)
    return canonicalize_quat(q.reshape(batch + (4,)))


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise RotationError("rotation axis must be nonzero")
    axis = axis / n
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    return np.concatenate(
        [np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1
    )


def rotvec_to_quat(w):
    """Exponential coordinates to quaternion (series-safe near zero)."""
    w = np.asarray(w, dtype=np.float64)
    a = np.linalg.norm(w, axis=-1)
    half = 0.5 * a
    # sin(a/2)/a, with its a -> 0 limit 1/2
    small = a < 1e-8
    scale = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, a))
    return np.concatenate([np.cos(half)[..., None], scale[..., None] * w], axis=-1)


def slerp(q0, q1, u):
    """Shortest-arc spherical interpolation between unit quaternions.

    Nearly-parallel inputs fall back to normalized linear interpolation.
    An exactly antipodal pair after canonicalization has no defined axis
    and raises :class:`RotationError`.
    """
    q0 = normalize_quat(q0)
    q1 = normalize_quat(q1)
    u = np.asarray(u, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1)
    sign = np.where(dot < 0.0, -1.0, 1.0)
    q1 = q1 * sign[..., None]
    dot = dot * sign
    if np.any(dot < -1.0 + 1e-12):
        raise RotationError("antipodal quaternions: interpolation axis undefined")
    dot = np.minimum(dot, 1.0)
    near = dot > 1.0 - 1e-10
    omega = np.arccos(np.where(near, 0.0, dot))
    sin_omega = np.sin(omega)
    safe = np.where(near, 1.0, sin_omega)
    c0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * omega) / safe)
    c1 = np.where(near, u, np.sin(u * omega) / safe)
    out = c0[..., None] * q0 + c1[..., None] * q1
    return normalize_quat(out)


def piecewise_heading(q_start, q_mid, q_end, t, T):
    """Piecewise-SLERP heading matrix through three knots at 0, T/2, T.

    ``t`` may be scalar or a batch; values outside [0, T] clamp to the
    nearest knot. Returns rotation matrices.
    """
    if T <= 0:
        raise RotationError("recording length T must be positive")
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, T)
    u = 2.0 * t / T
    first = u <= 1.0
    u0 = np.clip(u, 0.0, 1.0)
    u1 = np.clip(u - 1.0, 0.0, 1.0)
    qa = slerp(q_start, q_mid, u0)
    qb = slerp(q_mid, q_end, u1)
    q = np.where(first[..., None], qa, qb)
    return quat_to_matrix(q)


def geodesic_angle(ra, rb):
    """Angle of ``ra @ rb^-1`` in [0, pi]; the trace argument is clamped
    before arccos to absorb round-off."""
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    rel = np.matmul(ra, np.swapaxes(rb, -1, -2))
    tr = np.trace(rel, axis1=-2, axis2=-1)
    arg = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(arg)


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def vee(m):
    """3-vector of a skew-symmetric matrix. Accepts Tensors."""
    return tape.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def angular_velocity(r, rdot, symmetric_warn=1e-3):
    """Body-frame rate ``vee(R^-1 Rdot)``.

    The product is symmetrized to skew form; a symmetric residual above
    ``symmetric_warn`` triggers a warning because it means ``rdot`` is not
    tangent to the rotation manifold at ``r``.
    """
    r = np.asarray(r, dtype=np.float64)
    rdot = np.asarray(rdot, dtype=np.float64)
    m = np.matmul(np.swapaxes(r, -1, -2), rdot)
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    residual = float(np.max(np.sqrt(np.sum(sym * sym, axis=(-2, -1)))))
    if residual > symmetric_warn:
        warnings.warn(
            f"angular_velocity: symmetric residual {residual:.2e} exceeds "
            f"{symmetric_warn:g}; Rdot is inconsistent with R",
            stacklevel=2,
        )
    skw = 0.5 * (m - np.swapaxes(m, -1, -2))
    return np.stack([skw[..., 2, 1], skw[..., 0, 2], skw[..., 1, 0]], axis=-1)


def random_quaternion(rng, n=None):
    """Uniform random rotations (Shoemake's subgroup method)."""
    shape = () if n is None else (n,)
    u1, u2, u3 = rng.random(shape), rng.random(shape), rng.random(shape)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    return np.stack(
        [
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
            b * np.cos(2 * np.pi * u3),
        ],
        axis=-1,
    )


# -- differentiable drift interpolation ------------------------------------


def slerp_graph(q0, q1, u):
    """Smooth SLERP for optimization graphs.

    Identical to :func:`slerp` away from the parallel/antipodal limits; near
    them the interpolation angle is computed from a clamped dot product,
    which keeps every intermediate finite and differentiable at the cost of
    an O(1e-9) rad error. ``u`` is a plain array; ``q0``/``q1`` may be
    Tensors of shape (..., 4) and are normalized in-graph.
    """
    def norm(q):
        n2 = tape.tsum(q * q, axis=-1, keepdims=True)
        return q / tape.sqrt(n2)

    q0 = norm(q0)
    q1 = norm(q1)
    dot = tape.tsum(q0 * q1, axis=-1)
    sgn = np.where(tape.value_of(dot) < 0.0, -1.0, 1.0)
    q1 = q1 * sgn[..., None]
    dot = dot * sgn
    dot = tape.clip(dot, -1.0 + 1e-9, 1.0 - 1e-9)
    omega = atan2_acos(dot)
    sin_omega = tape.sin(omega)
    c0 = tape.sin((1.0 - u) * omega) / sin_omega
    c1 = tape.sin(u * omega) / sin_omega
    out = c0[..., None] * q0 + c1[..., None] * q1
    return norm(out)


def atan2_acos(x):
    """arccos via atan2, stable to differentiate for |x| < 1."""
    return tape.atan2(tape.sqrt(1.0 - x * x), x)


def heading_graph(knots, u, T):
    """Drift rotation matrices at recording times ``u`` from a (..., 3, 4)
    stack of knot quaternions. Both arguments may be Tensors; time gradients
    flow through the interpolation parameter (clamped at the knots). ``u``
    may carry extra trailing sample dimensions beyond the knot batch (e.g.
    per-sensor knots with a per-sensor row of times)."""
    t = tape.clip(u, 0.0, T)
    s = t * (2.0 / T)
    first = tape.value_of(s) <= 1.0
    s0 = tape.clip(s, 0.0, 1.0)
    s1 = tape.clip(s - 1.0, 0.0, 1.0)
    q_start, q_mid, q_end = knots[..., 0, :], knots[..., 1, :], knots[..., 2, :]
    extra = _ndim(u) - (_ndim(q_start) - 1)
    if extra > 0:
        shape = tape.value_of(q_start).shape
        expanded = shape[:-1] + (1,) * extra + (4,)
        q_start = tape.reshape(q_start, expanded)
        q_mid = tape.reshape(q_mid, expanded)
        q_end = tape.reshape(q_end, expanded)
    qa = slerp_graph(q_start, q_mid, s0)
    qb = slerp_graph(q_mid, q_end, s1)
    q = tape.where(first[..., None], qa, qb)
    return _quat_to_matrix_graph(q)


def _ndim(x):
    return x.value.ndim if isinstance(x, Tensor) else np.ndim(x)
