"""Configurable kinematic-tree body model with differentiable forward
kinematics.

A tree is built from a descriptor (a JSON-compatible dict, normally loaded
from a file): an ordered list of segments, each with a parent, a rest
translation, and a joint (a 6-DOF free root, a sequence of hinge axes, or a
weld), plus marker attachments and a scale-group assignment. Scaling is
isotropic per segment: a scale-mapping matrix turns the log-scale vector into
per-segment factors, a child's rest translation scales with its parent's
factor (bone length lives on the parent), and marker locals scale with their
own segment's factor.

``forward_kinematics`` accepts plain arrays or :class:`~kinefuse.tape.Tensor`
parameters, so the same code serves evaluation and gradient-based fitting.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import tape
from .tape import Tensor

DEFAULT_SCHEMA = "kinefuse-body/1"
_TINY = 1e-30


class ModelError(ValueError):
    """Descriptor or model-input validation failure."""


@dataclass(frozen=True)
class Joint:
    kind: str                      # "free" | "hinges" | "weld"
    name: str | None = None
    axes: np.ndarray | None = None  # (k, 3) unit axes, hinges only
    primary: int = 0


@dataclass
class ScaleParams:
    """Body shape parameters: per-group log-scales plus marker offsets (m)."""

    log_scales: np.ndarray
    marker_offsets: np.ndarray

    @classmethod
    def neutral(cls, tree: "KinematicTree") -> "ScaleParams":
        return cls(
            np.zeros(tree.n_scale_groups),
            np.zeros((tree.n_markers, 3)),
        )

    def validate(self, tree: "KinematicTree") -> None:
        if self.log_scales.shape != (tree.n_scale_groups,):
            raise ModelError("scale vector length mismatch")
        if self.marker_offsets.shape != (tree.n_markers, 3):
            raise ModelError("marker offset shape mismatch")
        lim = tree.marker_offset_limit_m
        if np.any(np.abs(self.marker_offsets) > lim + 1e-12):
            raise ModelError(f"marker offsets exceed |{lim}| m")


@dataclass
class FkOutput:
    markers: object | None        # (..., M, 3)
    seg_rot: object               # (..., S, 3, 3)
    seg_pos: object               # (..., S, 3)


class KinematicTree:
    """Immutable body model; build with :func:`build_tree` or
    :func:`default_tree`."""

    def __init__(self, descriptor: dict):
        self.descriptor = descriptor
        self.schema = descriptor.get("schema")
        if self.schema != DEFAULT_SCHEMA:
            raise ModelError(f"unsupported descriptor schema: {self.schema!r}")
        self.name = descriptor.get("name", "unnamed")
        limits = descriptor.get("limits", {})
        self.joint_range_rad = float(limits.get("joint_range_rad", np.pi))
        self.marker_offset_limit_m = float(limits.get("marker_offset_m", 0.05))

        segs = descriptor.get("segments", [])
        if not segs:
            raise ModelError("descriptor has no segments")
        self.segment_names: list[str] = []
        self.parents = np.empty(len(segs), dtype=int)
        self.rest_translations = np.empty((len(segs), 3))
        self.joints: list[Joint] = []
        index: dict[str, int] = {}
        self._joint_lookup: dict[str, tuple[int, int, int]] = {}

        dof = 0
        self.dof_names: list[str] = []
        self._dof_slices: list[tuple[int, int]] = []
        for i, s in enumerate(segs):
            name = s["name"]
            if name in index:
                raise ModelError(f"duplicate segment name {name!r}")
            parent = s.get("parent")
            if i == 0:
                if parent is not None:
                    raise ModelError("first segment must be the root (parent null)")
            else:
                if parent == name:
                    raise ModelError(f"segment {name!r} cannot be its own parent")
                if parent not in index:
                    raise ModelError(
                        f"segment {name!r}: parent {parent!r} not defined earlier "
                        "(segments must be in topological order)"
                    )
            self.parents[i] = -1 if i == 0 else index[parent]
            self.rest_translations[i] = np.asarray(s["translation"], dtype=np.float64)
            joint = self._parse_joint(i, name, s.get("joint", {"type": "weld"}))
            self.joints.append(joint)
            start = dof
            if joint.kind == "free":
                self.dof_names += [f"{name}_t{ax}" for ax in "xyz"]
                self.dof_names += [f"{name}_r{ax}" for ax in "xyz"]
                dof += 6
            elif joint.kind == "hinges":
                k = joint.axes.shape[0]
                if k == 1:
                    self.dof_names.append(joint.name)
                else:
                    self.dof_names += [f"{joint.name}_{j}" for j in range(k)]
                self._joint_lookup[joint.name] = (start, k, joint.primary)
                dof += k
            self._dof_slices.append((start, dof))
            self.segment_names.append(name)
            index[name] = i
        self._segment_index = index
        self.n_dofs = dof

        groups = descriptor.get("scale_groups")
        if not groups or len(set(groups)) != len(groups):
            raise ModelError("scale_groups must be a non-empty unique list")
        self.scale_groups = list(groups)
        gidx = {g: k for k, g in enumerate(groups)}
        self.scale_map = np.zeros((len(segs), len(groups)))
        if "overall" in gidx:
            self.scale_map[:, gidx["overall"]] = 1.0
        for i, s in enumerate(segs):
            g = s.get("scale_group")
            if g is not None:
                if g not in gidx:
                    raise ModelError(f"segment {s['name']!r}: unknown scale group {g!r}")
                self.scale_map[i, gidx[g]] = 1.0

        marks = descriptor.get("markers", [])
        names = [m["name"] for m in marks]
        if len(set(names)) != len(names):
            raise ModelError("duplicate marker names")
        self.marker_names = names
        self.marker_segments = np.array(
            [self._require_segment(m["segment"]) for m in marks], dtype=int
        )
        self.marker_locals = (
            np.array([m["position"] for m in marks], dtype=np.float64)
            if marks
            else np.zeros((0, 3))
        )

        # constant skew powers for the hinge rotation formula; the root is
        # the only non-hinge contributor, so hinge DOFs occupy the contiguous
        # slice [root_dofs:] and can be built in one vectorized stack
        self._root_dofs = self._dof_slices[0][1]
        n_h = self.n_dofs - self._root_dofs
        self._hinge_k_stack = np.zeros((n_h, 3, 3))
        self._hinge_k2_stack = np.zeros((n_h, 3, 3))
        for i, j in enumerate(self.joints):
            if j.kind != "hinges":
                continue
            lo, _ = self._dof_slices[i]
            for a, ax in enumerate(j.axes):
                k = _skew_const(ax)
                self._hinge_k_stack[lo + a - self._root_dofs] = k
                self._hinge_k2_stack[lo + a - self._root_dofs] = k @ k

    @staticmethod
    def _parse_joint(i, name, spec):
        kind = spec.get("type", "hinges" if "axes" in spec else None)
        if i == 0:
            if kind != "free":
                raise ModelError("root segment must carry the free joint")
            return Joint("free")
        if kind == "free":
            raise ModelError("only the root may have a free joint")
        if kind == "weld":
            return Joint("weld")
        axes = np.asarray(spec.get("axes", []), dtype=np.float64)
        if axes.ndim != 2 or axes.shape[1] != 3 or axes.shape[0] == 0:
            raise ModelError(f"segment {name!r}: joint needs a (k,3) axes list")
        norms = np.linalg.norm(axes, axis=1)
        if np.any(norms < 1e-9):
            raise ModelError(f"segment {name!r}: zero joint axis")
        axes = axes / norms[:, None]
        jname = spec.get("name", f"{name}_joint")
        primary = int(spec.get("primary", 0))
        if not 0 <= primary < axes.shape[0]:
            raise ModelError(f"joint {jname!r}: primary axis index out of range")
        return Joint("hinges", jname, axes, primary)

    def _require_segment(self, name):
        if name not in self._segment_index:
            raise ModelError(f"unknown segment {name!r}")
        return self._segment_index[name]

    # -- introspection ------------------------------------------------------

    @property
    def n_segments(self) -> int:
        return len(self.segment_names)

    @property
    def n_markers(self) -> int:
        return len(self.marker_names)

    @property
    def n_scale_groups(self) -> int:
        return len(self.scale_groups)

    def segment_index(self, name: str) -> int:
        return self._require_segment(name)

    def dof_slice(self, segment: int) -> tuple[int, int]:
        return self._dof_slices[segment]

    def joint_names(self) -> list[str]:
        return list(self._joint_lookup)

    def joint_dof(self, joint: str) -> int:
        """Flat DOF index of a joint's primary axis."""
        if joint not in self._joint_lookup:
            raise ModelError(f"unknown joint {joint!r}")
        start, _, primary = self._joint_lookup[joint]
        return start + primary

    def descriptor_hash(self) -> str:
        blob = json.dumps(self.descriptor, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def ancestors_closure(self, segments) -> list[int]:
        """Indices of ``segments`` plus all their ancestors, in tree order."""
        needed = set()
        for s in segments:
            i = s if isinstance(s, (int, np.integer)) else self._require_segment(s)
            while i >= 0:
                needed.add(int(i))
                i = self.parents[i]
        return sorted(needed)


def _skew_const(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def load_descriptor(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def default_descriptor() -> dict:
    with resources.files("kinefuse.data").joinpath("lower_body.json").open() as fh:
        return json.load(fh)


def build_tree(descriptor: dict) -> KinematicTree:
    return KinematicTree(descriptor)


def default_tree() -> KinematicTree:
    return KinematicTree(default_descriptor())


# -- forward kinematics -----------------------------------------------------


def _segment_scales(tree, log_scales):
    logf = tape.matmul(tree.scale_map, log_scales)
    return tape.exp(logf)  # (S,)


def _rodrigues(w):
    """Rotation matrix of exponential coordinates ``w`` (..., 3).

    Written with guarded denominators so values and gradients stay finite at
    the zero rotation.
    """
    a2 = tape.tsum(w * w, axis=-1) + _TINY
    a = tape.sqrt(a2)
    sa = tape.sin(a)
    ca = tape.cos(a)
    half_sin = tape.sin(0.5 * a)
    big_a = sa / a                      # sin a / a
    big_b = 2.0 * half_sin * half_sin / a2  # (1 - cos a) / a^2
    wx = _skew_graph(w)
    wx2 = tape.matmul(wx, wx)
    eye = np.eye(3)
    sh = _shape_of(w)[:-1] + (1, 1)
    return eye + tape.reshape(big_a, sh) * wx + tape.reshape(big_b, sh) * wx2


def _rodrigues_with_rate(w, wdot):
    """(R, Rdot) for exponential coordinates and their time derivative."""
    a2 = tape.tsum(w * w, axis=-1) + _TINY
    a = tape.sqrt(a2)
    sa = tape.sin(a)
    ca = tape.cos(a)
    half_sin = tape.sin(0.5 * a)
    big_a = sa / a
    big_b = 2.0 * half_sin * half_sin / a2
    # dA/dt = A'(a) * da/dt with da/dt = (w . wdot)/a; grouped to avoid 1/a
    wdw = tape.tsum(w * wdot, axis=-1)
    big_a_dot = (a * ca - sa) / (a2 * a) * wdw
    big_b_dot = (a * sa - 4.0 * half_sin * half_sin) / (a2 * a2) * wdw
    wx = _skew_graph(w)
    wx2 = tape.matmul(wx, wx)
    wdx = _skew_graph(wdot)
    cross_term = tape.matmul(wdx, wx) + tape.matmul(wx, wdx)
    eye = np.eye(3)
    sh = _shape_of(w)[:-1] + (1, 1)
    r = eye + tape.reshape(big_a, sh) * wx + tape.reshape(big_b, sh) * wx2
    rdot = (
        tape.reshape(big_a_dot, sh) * wx
        + tape.reshape(big_a, sh) * wdx
        + tape.reshape(big_b_dot, sh) * wx2
        + tape.reshape(big_b, sh) * cross_term
    )
    return r, rdot


def _skew_graph(v):
    z = np.zeros(_shape_of(v)[:-1])
    return tape.stack(
        [
            tape.stack([z, -v[..., 2], v[..., 1]], axis=-1),
            tape.stack([v[..., 2], z, -v[..., 0]], axis=-1),
            tape.stack([-v[..., 1], v[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def _shape_of(x):
    return x.shape if isinstance(x, Tensor) else np.shape(x)


_EYE3 = np.eye(3)


def _unsqueeze2(x):
    return tape.reshape(x, _shape_of(x) + (1, 1))


def _beta_arrays(tree, beta):
    if isinstance(beta, ScaleParams):
        return beta.log_scales, beta.marker_offsets
    log_scales, offsets = beta
    if not isinstance(log_scales, Tensor):
        log_scales = np.asarray(log_scales, dtype=np.float64)
    if not isinstance(offsets, Tensor):
        offsets = np.asarray(offsets, dtype=np.float64)
    return log_scales, offsets


def _check_theta(tree, theta):
    shape = _shape_of(theta)
    if shape[-1] != tree.n_dofs:
        raise ModelError(
            f"pose vector has {shape[-1]} entries, tree has {tree.n_dofs} DOFs"
        )
    if not isinstance(theta, Tensor):
        theta = np.asarray(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta)):
            raise ModelError("pose vector contains non-finite values")
    return theta


def fk_chain(tree, beta, theta, theta_dot=None, segments=None, want_markers=True):
    """Core FK walk. Returns ``(markers, pos, rot, rot_dot)`` keyed by
    segment index (dicts for pos/rot), computing only ``segments`` and their
    ancestors when given. ``theta`` is (..., D); all outputs share the batch
    shape. Accepts Tensors anywhere.
    """
    theta = _check_theta(tree, theta)
    log_scales, marker_offsets = _beta_arrays(tree, beta)
    factors = _segment_scales(tree, log_scales)

    if segments is None:
        order = range(tree.n_segments)
    else:
        if want_markers:
            raise ModelError("marker computation requires the full segment set")
        order = tree.ancestors_closure(segments)

    with_rate = theta_dot is not None
    pos: dict[int, object] = {}
    rot: dict[int, object] = {}
    rot_dot: dict[int, object] = {}

    # all hinge rotations built in one vectorized stack: (..., Dh, 3, 3)
    rd = tree._root_dofs
    hinge_rot = None
    hinge_rot_dot = None
    if tree.n_dofs > rd:
        th_h = theta[..., rd:]
        s = tape.sin(th_h)
        c = tape.cos(th_h)
        s_e = _unsqueeze2(s)
        c1_e = _unsqueeze2(1.0 - c)
        k, k2 = tree._hinge_k_stack, tree._hinge_k2_stack
        hinge_rot = _EYE3 + s_e * k + c1_e * k2
        if with_rate:
            thd_h = theta_dot[..., rd:]
            hinge_rot_dot = _unsqueeze2(thd_h * c) * k + _unsqueeze2(thd_h * s) * k2

    for i in order:
        joint = tree.joints[i]
        lo, hi = tree.dof_slice(i)
        parent = tree.parents[i]
        if parent < 0:
            # rest translation of the root rides its own scale factor
            t_local = factors[i] * tree.rest_translations[i]
            w = theta[..., lo + 3 : lo + 6]
            if with_rate:
                r, rdot = _rodrigues_with_rate(w, theta_dot[..., lo + 3 : lo + 6])
                rot_dot[i] = rdot
            else:
                r = _rodrigues(w)
            rot[i] = r
            pos[i] = theta[..., lo : lo + 3] + t_local
            continue

        p_r = rot[parent]
        t_local = factors[parent] * tree.rest_translations[i]
        pos[i] = pos[parent] + _matvec(p_r, t_local)

        if joint.kind == "weld":
            rot[i] = p_r
            if with_rate:
                rot_dot[i] = rot_dot[parent]
            continue

        r_j = None
        r_j_dot = None
        for a in range(hi - lo):
            d = lo + a - rd
            r_a = hinge_rot[..., d, :, :]
            if with_rate:
                r_a_dot = hinge_rot_dot[..., d, :, :]
                if r_j is None:
                    r_j, r_j_dot = r_a, r_a_dot
                else:
                    r_j_dot = tape.matmul(r_j_dot, r_a) + tape.matmul(r_j, r_a_dot)
                    r_j = tape.matmul(r_j, r_a)
            else:
                r_j = r_a if r_j is None else tape.matmul(r_j, r_a)
        rot[i] = tape.matmul(p_r, r_j)
        if with_rate:
            rot_dot[i] = tape.matmul(rot_dot[parent], r_j) + tape.matmul(p_r, r_j_dot)

    markers = None
    if want_markers and tree.n_markers:
        per_marker = [None] * tree.n_markers
        for i in order:
            sel = np.nonzero(tree.marker_segments == i)[0]
            if sel.size == 0:
                continue
            locs = factors[i] * tree.marker_locals[sel] + marker_offsets[sel]  # (m, 3)
            r = rot[i]
            p = pos[i]
            pts = _matvec_batch(r, locs) + _expand_mid(p, len(sel))
            for j, m in enumerate(sel):
                per_marker[m] = pts[..., j, :]
        markers = tape.stack(per_marker, axis=-2)

    return markers, pos, rot, (rot_dot if with_rate else None)


def _matvec(r, v):
    """(..., 3, 3) @ (..., 3) -> (..., 3)."""
    out = tape.matmul(r, _unsqueeze_last(v))
    return out[..., 0]


def _unsqueeze_last(v):
    return tape.reshape(v, _shape_of(v) + (1,))


def _matvec_batch(r, pts):
    """(..., 3, 3) @ (m, 3) -> (..., m, 3)."""
    rt = tape.transpose_last2(r)
    return tape.matmul(pts, rt)


def _expand_mid(p, m):
    """(..., 3) -> (..., 1, 3) for broadcasting over m points."""
    return tape.reshape(p, _shape_of(p)[:-1] + (1, 3))


def forward_kinematics(tree, beta, theta) -> FkOutput:
    """Marker positions and segment orientations for poses ``theta``.

    ``theta`` is (D,) or (N, D); outputs carry the same leading shape.
    """
    markers, pos, rot, _ = fk_chain(tree, beta, theta)
    seg_rot = tape.stack([rot[i] for i in range(tree.n_segments)], axis=-3)
    seg_pos = tape.stack([pos[i] for i in range(tree.n_segments)], axis=-2)
    return FkOutput(markers, seg_rot, seg_pos)


def fk_time_derivative(tree, beta, theta, theta_dot):
    """Segment orientations and their exact time derivatives.

    Returns ``(seg_rot, seg_rot_dot)`` stacked over segments.
    """
    if _shape_of(theta) != _shape_of(theta_dot):
        raise ModelError("theta_dot must match theta in shape")
    _, _, rot, rot_dot = fk_chain(tree, beta, theta, theta_dot=theta_dot,
                                  want_markers=False)
    seg_rot = tape.stack([rot[i] for i in range(tree.n_segments)], axis=-3)
    seg_rot_dot = tape.stack([rot_dot[i] for i in range(tree.n_segments)], axis=-3)
    return seg_rot, seg_rot_dot


def extract_joint_angle(tree, theta, joint) -> np.ndarray:
    """Signed angle of a joint's primary axis, in degrees."""
    idx = tree.joint_dof(joint)
    theta = np.asarray(tape.value_of(theta), dtype=np.float64)
    return np.degrees(theta[..., idx])
