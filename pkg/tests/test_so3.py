"""Rotation algebra: conversions, SLERP, heading interpolation, geodesic
distance, and the angular-velocity identity."""

import numpy as np
import pytest

from kinefuse import so3, tape

rng = np.random.default_rng(7)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestQuatMatrix:
    def test_identity(self):
        assert np.allclose(so3.quat_to_matrix([1, 0, 0, 0]), np.eye(3))

    def test_90_about_z_maps_x_to_y(self):
        q = so3.axis_angle_quat([0, 0, 1], np.pi / 2)
        r = so3.quat_to_matrix(q)
        assert np.allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_double_cover(self):
        q = so3.random_quaternion(rng, 10)
        assert np.allclose(so3.quat_to_matrix(q), so3.quat_to_matrix(-q))

    def test_round_trip(self):
        q = so3.random_quaternion(rng, 200)
        r = so3.quat_to_matrix(q)
        q2 = so3.matrix_to_quat(r)
        err = np.minimum(np.linalg.norm(q - q2, axis=-1),
                         np.linalg.norm(q + q2, axis=-1))
        assert err.max() < 1e-9

    def test_properness(self):
        r = so3.quat_to_matrix(so3.random_quaternion(rng, 50))
        assert np.abs(r @ np.swapaxes(r, -1, -2) - np.eye(3)).max() < 1e-9
        assert np.abs(np.linalg.det(r) - 1.0).max() < 1e-9

    def test_norm_policy(self):
        q = so3.random_quaternion(rng)
        # small deviation: silently normalized
        r = so3.quat_to_matrix(q * (1 + 5e-4))
        assert np.allclose(r, so3.quat_to_matrix(q), atol=1e-12)
        # large deviation: rejected
        with pytest.raises(so3.RotationError):
            so3.quat_to_matrix(q * 1.01)


class TestSlerp:
    def test_endpoints(self):
        q0, q1 = so3.random_quaternion(rng, 2)
        # same rotation as the endpoint: |<q, q_end>| = 1
        assert abs(abs(np.dot(so3.slerp(q0, q1, 0.0), q0)) - 1.0) < 1e-12
        assert abs(abs(np.dot(so3.slerp(q0, q1, 1.0), q1)) - 1.0) < 1e-12

    def test_halfway_about_z(self):
        q0 = np.array([1.0, 0, 0, 0])
        q1 = so3.axis_angle_quat([0, 0, 1], np.pi / 2)
        qm = so3.slerp(q0, q1, 0.5)
        expected = so3.axis_angle_quat([0, 0, 1], np.pi / 4)
        assert np.allclose(so3.quat_to_matrix(qm), so3.quat_to_matrix(expected),
                           atol=1e-12)

    def test_self_interpolation(self):
        q = so3.random_quaternion(rng)
        for u in (0.0, 0.3, 0.77, 1.0):
            assert abs(abs(np.dot(so3.slerp(q, q, u), q)) - 1.0) < 1e-12

    def test_geodesic_proportionality(self):
        for _ in range(200):
            q0, q1 = so3.random_quaternion(rng, 2)
            u = rng.random()
            qs = so3.slerp(q0, q1, u)
            full = so3.geodesic_angle(so3.quat_to_matrix(q0), so3.quat_to_matrix(q1))
            part = so3.geodesic_angle(so3.quat_to_matrix(q0), so3.quat_to_matrix(qs))
            assert abs(part - u * full) < 1e-9

    def test_nearly_parallel_falls_back_to_nlerp(self):
        q0 = so3.random_quaternion(rng)
        tiny = so3.axis_angle_quat([0, 0, 1.0], 2e-6)
        q1 = so3.quat_multiply(q0, tiny)
        u = 0.37
        qs = so3.slerp(q0, q1, u)
        # compare against the exact geodesic fraction via the high-precision
        # relative-angle formula
        full = 2e-6
        part = so3.geodesic_angle(so3.quat_to_matrix(q0), so3.quat_to_matrix(qs))
        assert abs(part - u * full) < 1e-9


class TestPiecewiseHeading:
    def test_identity_knots(self):
        qi = np.array([1.0, 0, 0, 0])
        for t in np.linspace(0, 10, 17):
            assert np.allclose(so3.piecewise_heading(qi, qi, qi, t, 10.0),
                               np.eye(3), atol=1e-12)

    def test_knot_exactness(self):
        qa, qb, qc = so3.random_quaternion(rng, 3)
        T = 8.0
        for t, qk in ((0.0, qa), (T / 2, qb), (T, qc)):
            r = so3.piecewise_heading(qa, qb, qc, t, T)
            assert np.abs(r - so3.quat_to_matrix(qk)).max() < 1e-12

    def test_quarter_point(self):
        qi = np.array([1.0, 0, 0, 0])
        qm = so3.axis_angle_quat([0, 0, 1], np.radians(10.0))
        qe = so3.axis_angle_quat([0, 0, 1], np.radians(30.0))
        r = so3.piecewise_heading(qi, qm, qe, 2.5, 10.0)
        assert np.allclose(r, rot_z(np.radians(5.0)), atol=1e-12)

    def test_clamps_outside_window(self):
        qa, qb, qc = so3.random_quaternion(rng, 3)
        T = 4.0
        assert np.allclose(so3.piecewise_heading(qa, qb, qc, -0.5, T),
                           so3.quat_to_matrix(qa), atol=1e-12)
        assert np.allclose(so3.piecewise_heading(qa, qb, qc, T + 0.3, T),
                           so3.quat_to_matrix(qc), atol=1e-12)

    def test_continuity_at_midpoint(self):
        qa, qb, qc = so3.random_quaternion(rng, 3)
        T = 6.0
        left = so3.piecewise_heading(qa, qb, qc, T / 2 - 1e-9, T)
        right = so3.piecewise_heading(qa, qb, qc, T / 2 + 1e-9, T)
        assert np.abs(left - right).max() < 1e-7

    def test_batched_times(self):
        qa, qb, qc = so3.random_quaternion(rng, 3)
        ts = np.linspace(0, 5, 11)
        r = so3.piecewise_heading(qa, qb, qc, ts, 5.0)
        assert r.shape == (11, 3, 3)


class TestGeodesicAngle:
    def test_zero_for_equal(self):
        r = so3.quat_to_matrix(so3.random_quaternion(rng))
        assert so3.geodesic_angle(r, r) < 1e-7

    def test_30_degrees(self):
        r = so3.quat_to_matrix(so3.axis_angle_quat(rng.normal(size=3),
                                                   np.radians(30)))
        assert abs(so3.geodesic_angle(np.eye(3), r) - 0.5235987755982988) < 1e-12

    def test_symmetry(self):
        for _ in range(50):
            ra, rb = so3.quat_to_matrix(so3.random_quaternion(rng, 2))
            assert abs(so3.geodesic_angle(ra, rb)
                       - so3.geodesic_angle(rb, ra)) < 1e-12

    def test_triangle_inequality(self):
        for _ in range(200):
            ra, rb, rc = so3.quat_to_matrix(so3.random_quaternion(rng, 3))
            ab = so3.geodesic_angle(ra, rb)
            bc = so3.geodesic_angle(rb, rc)
            ac = so3.geodesic_angle(ra, rc)
            assert ac <= ab + bc + 1e-9


class TestAngularVelocity:
    def test_constant_rate_about_z(self):
        w0 = 1.7
        t = 0.9
        r = rot_z(w0 * t)
        rdot = w0 * so3.skew([0, 0, 1.0]) @ r
        w = so3.angular_velocity(r, rdot)
        assert np.allclose(w, [0, 0, w0], atol=1e-12)

    def test_zero_rate(self):
        r = so3.quat_to_matrix(so3.random_quaternion(rng))
        assert np.allclose(so3.angular_velocity(r, np.zeros((3, 3))), 0.0)

    def test_finite_difference_oracle(self):
        # smooth rotation path: R(t) = exp(a(t)K1) exp(b(t)K2)
        k1 = so3.skew([0.3, -0.5, 0.81])
        k2 = so3.skew([-0.7, 0.2, 0.4])
        def rot(t):
            a, b = np.sin(1.3 * t), np.cos(0.7 * t)
            return _expm(a * k1) @ _expm(b * k2)
        t0, h = 0.63, 1e-6
        r = rot(t0)
        rdot = (rot(t0 + h) - rot(t0 - h)) / (2 * h)
        w = so3.angular_velocity(r, rdot)
        hh = 1e-5
        dq = so3.matrix_to_quat(r.T @ rot(t0 + hh))
        w_fd = 2.0 * dq[1:] / hh  # small-angle body rotation per unit time
        assert np.abs(w - w_fd).max() < 1e-5

    def test_equivariance_to_left_rotation(self):
        k = so3.skew(rng.normal(size=3))
        r = so3.quat_to_matrix(so3.random_quaternion(rng))
        rdot = r @ k  # body-frame rate k
        q = so3.quat_to_matrix(so3.random_quaternion(rng))
        w1 = so3.angular_velocity(r, rdot)
        w2 = so3.angular_velocity(q @ r, q @ rdot)
        assert np.allclose(w1, w2, atol=1e-12)

    def test_symmetric_residual_warns(self):
        r = np.eye(3)
        rdot = np.eye(3) * 0.5  # pure symmetric: inconsistent with rotation
        with pytest.warns(UserWarning):
            so3.angular_velocity(r, rdot)


def _expm(skew_mat):
    v = so3.vee(skew_mat)
    a = np.linalg.norm(v)
    if a < 1e-12:
        return np.eye(3)
    k = skew_mat / a
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)


class TestGraphVariants:
    def test_heading_graph_matches_value_path(self):
        knots = so3.random_quaternion(rng, 3)
        ts = np.linspace(0, 7, 13)
        r1 = so3.piecewise_heading(knots[0], knots[1], knots[2], ts, 7.0)
        r2 = tape.value_of(so3.heading_graph(np.stack(list(knots)), ts, 7.0))
        assert np.abs(r1 - r2).max() < 1e-7

    def test_heading_graph_gradients(self):
        knots = so3.random_quaternion(rng, 3).reshape(1, 3, 4)
        ts = np.array([1.1, 4.4, 6.2])
        kt = tape.Tensor(knots)
        out = tape.tsum(so3.heading_graph(kt, ts, 7.0) ** 2)
        tape.backward(out)
        h = 1e-6
        flat = knots.ravel()
        for k in rng.choice(flat.size, 6, replace=False):
            fp, fm = flat.copy(), flat.copy()
            fp[k] += h
            fm[k] -= h
            vp = float(np.sum(tape.value_of(
                so3.heading_graph(fp.reshape(knots.shape), ts, 7.0)) ** 2))
            vm = float(np.sum(tape.value_of(
                so3.heading_graph(fm.reshape(knots.shape), ts, 7.0)) ** 2))
            fd = (vp - vm) / (2 * h)
            assert abs(fd - kt.grad.ravel()[k]) / max(1.0, abs(fd)) < 1e-5
