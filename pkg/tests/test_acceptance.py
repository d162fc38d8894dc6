"""Acceptance suite: every shipped claim exercised end to end.

One test per criterion, each printing a single PASS/FAIL line (run with
``-s`` to see them as they land). Criteria 5-7 run real multi-thousand-step
fits and dominate the suite's runtime; everything else is seconds.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from kinefuse import (body, camera, evaluation, objective, sensors, so3,
                      synth, tape, trajectory)

rng = np.random.default_rng(2024)

# criteria 6 and 7 fix scenarios and comparisons but not the optimizer
# budget; they run the proportionally scaled schedule below
COMPARISON_STEPS = 5000
NOISY_SEEDS = (0, 1, 2, 3, 4)
OCCLUSION_SEEDS = (0, 1, 2)


def _report(num, name, ok, detail):
    line = f"CRITERION {num} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line, flush=True)
    assert ok, line


# -- criterion 1: SO(3) suite --------------------------------------------------


def test_criterion_1_so3_suite():
    t0 = time.perf_counter()
    n = 1000

    q0 = so3.random_quaternion(rng, n)
    q1 = so3.random_quaternion(rng, n)
    u = rng.random(n)
    worst_slerp = 0.0
    for i in range(n):
        qs = so3.slerp(q0[i], q1[i], u[i])
        full = so3.geodesic_angle(so3.quat_to_matrix(q0[i]),
                                  so3.quat_to_matrix(q1[i]))
        part = so3.geodesic_angle(so3.quat_to_matrix(q0[i]),
                                  so3.quat_to_matrix(qs))
        worst_slerp = max(worst_slerp, abs(part - u[i] * full))

    knots = so3.random_quaternion(rng, (n, 3) if False else 3 * n).reshape(n, 3, 4)
    T = 10.0
    worst_knot = 0.0
    for t_knot, k in ((0.0, 0), (T / 2, 1), (T, 2)):
        r = np.stack([
            so3.piecewise_heading(knots[i, 0], knots[i, 1], knots[i, 2],
                                  t_knot, T)
            for i in range(n)
        ])
        expect = so3.quat_to_matrix(knots[:, k])
        worst_knot = max(worst_knot, float(np.abs(r - expect).max()))

    # angular velocity against central differences of random smooth paths
    worst_av = 0.0
    h = 1e-6
    axes_a = rng.normal(size=(n, 3))
    axes_b = rng.normal(size=(n, 3))
    rates = rng.normal(size=(n, 2))
    t_eval = rng.uniform(0, 2, size=n)

    def rot_path(i, t):
        ka = so3.skew(axes_a[i])
        kb = so3.skew(axes_b[i])
        return _expm(np.sin(rates[i, 0] * t) * ka) @ _expm(
            np.cos(rates[i, 1] * t) * kb)

    for i in range(n):
        t = t_eval[i]
        r = rot_path(i, t)
        rdot = (rot_path(i, t + h) - rot_path(i, t - h)) / (2 * h)
        w = so3.angular_velocity(r, rdot)
        hh = 2e-6
        dq = so3.matrix_to_quat(r.T @ rot_path(i, t + hh))
        w_fd = 2.0 * dq[1:] / hh
        worst_av = max(worst_av, float(np.abs(w - w_fd).max()))

    dt = time.perf_counter() - t0
    ok = worst_slerp < 1e-9 and worst_knot < 1e-9 and worst_av < 1e-5 and dt < 10.0
    _report(1, "SO(3) suite",
            ok,
            f"{n} cases: slerp prop {worst_slerp:.1e} (<1e-9), knot exactness "
            f"{worst_knot:.1e} (<1e-9), angular velocity vs FD {worst_av:.1e} "
            f"rad/s (<1e-5), runtime {dt:.1f}s (<10s)")


def _expm(skew_mat):
    v = so3.vee(skew_mat)
    a = np.linalg.norm(v)
    if a < 1e-12:
        return np.eye(3)
    k = skew_mat / a
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)


# -- criterion 2: FK oracle -------------------------------------------------


def test_criterion_2_fk_oracle():
    from test_body import oracle_fk, random_beta

    t0 = time.perf_counter()
    tree = body.default_tree()
    worst = 0.0
    for _ in range(100):
        beta = random_beta(tree)
        th = rng.normal(scale=0.5, size=tree.n_dofs)
        out = body.forward_kinematics(tree, beta, th)
        mk, rots = oracle_fk(tree, beta, th)
        worst = max(worst, float(np.abs(out.markers - mk).max()),
                    float(np.abs(out.seg_rot - rots).max()))

    # rigidity
    beta = random_beta(tree)
    th1 = rng.normal(scale=0.6, size=tree.n_dofs)
    th2 = rng.normal(scale=0.6, size=tree.n_dofs)
    m1 = body.forward_kinematics(tree, beta, th1).markers
    m2 = body.forward_kinematics(tree, beta, th2).markers
    rigid = 0.0
    for s in range(tree.n_segments):
        sel = np.nonzero(tree.marker_segments == s)[0]
        if sel.size < 2:
            continue
        d1 = np.linalg.norm(m1[sel][:, None] - m1[sel][None], axis=-1)
        d2 = np.linalg.norm(m2[sel][:, None] - m2[sel][None], axis=-1)
        rigid = max(rigid, float(np.abs(d1 - d2).max()))

    # equivariance
    th = rng.normal(scale=0.4, size=tree.n_dofs)
    th[0:6] = 0.0
    base = body.forward_kinematics(tree, beta, th)
    w = rng.normal(scale=0.8, size=3)
    th_rot = th.copy()
    th_rot[3:6] = w
    rolled = body.forward_kinematics(tree, beta, th_rot)
    r = so3.quat_to_matrix(so3.rotvec_to_quat(w))
    origin = base.seg_pos[0]
    equiv = max(
        float(np.abs(rolled.markers - ((base.markers - origin) @ r.T + origin)).max()),
        float(np.abs(rolled.seg_rot - r @ base.seg_rot).max()),
    )
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and rigid < 1e-12 and equiv < 1e-9 and dt < 30.0
    _report(2, "FK oracle",
            ok,
            f"100 instances vs independent oracle {worst:.1e} m (<1e-9), "
            f"rigidity {rigid:.1e} (<1e-12), equivariance {equiv:.1e}, "
            f"runtime {dt:.1f}s (<30s)")


# -- criterion 3: gradient checks ----------------------------------------------


def _tiny_tree():
    desc = {
        "schema": "kinefuse-body/1", "name": "tiny",
        "limits": {"joint_range_rad": 3.141592653589793, "marker_offset_m": 0.05},
        "scale_groups": ["overall", "a", "b"],
        "segments": [
            {"name": "base", "parent": None, "translation": [0, 0, 0.5],
             "joint": {"type": "free"}, "scale_group": "a"},
            {"name": "seg1", "parent": "base", "translation": [0, 0, -0.3],
             "joint": {"name": "j1", "axes": [[0, 1, 0], [1, 0, 0]]},
             "scale_group": "a"},
            {"name": "seg2", "parent": "seg1", "translation": [0, 0, -0.25],
             "joint": {"name": "j2", "axes": [[0, 1, 0]]}, "scale_group": "b"},
        ],
        "markers": [
            {"name": "m0", "segment": "base", "position": [0.05, 0, 0.1]},
            {"name": "m1", "segment": "seg1", "position": [0.02, 0.03, -0.15]},
            {"name": "m2", "segment": "seg2", "position": [0.0, -0.02, -0.2]},
        ],
    }
    return body.build_tree(desc)


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    tree = _tiny_tree()
    g = np.random.default_rng(11)
    T = 2.0
    n_f = 5
    net_cfg = trajectory.TrajectoryConfig(n_pose=tree.n_dofs, hidden_layers=1,
                                          hidden_width=16, frequency_bands=3)
    phi = g.normal(scale=0.1, size=net_cfg.n_params)
    scales = g.normal(scale=0.05, size=3)
    offsets = g.normal(scale=0.01, size=(3, 3))
    rsb = so3.random_quaternion(g, 2)
    knots = so3.random_quaternion(g, 6).reshape(2, 3, 4)
    deltas = g.normal(scale=0.05, size=3)

    t_v = np.sort(g.uniform(0, T, n_f))
    p_cam = g.normal(scale=0.3, size=(n_f, 3, 3)) + np.array([0, 0, 2.0])
    x2d = g.uniform(100, 500, size=(n_f, 3, 2))
    conf = g.uniform(0.3, 1.0, size=(n_f, 3))
    intr = camera.CameraIntrinsics(600, 600, 320, 240, 640, 480)
    att_t = np.stack([np.sort(g.uniform(0, T, n_f)) for _ in range(2)])
    att_read = np.stack([so3.quat_to_matrix(so3.random_quaternion(g, n_f))
                         for _ in range(2)])
    gyro_t = np.stack([np.sort(g.uniform(0, T, n_f)) for _ in range(2)])
    gyro_w = g.normal(scale=1.0, size=(2, n_f, 3))
    ph_t = np.sort(g.uniform(0, T, n_f))
    ph_w = g.normal(scale=0.5, size=(n_f, 3))
    t_s = np.sort(g.uniform(0, T - 0.02, n_f))
    seg_idx = [1, 2]

    def term(name, P, S, O, RSB, KN, DL):
        rsb_m = so3.quat_to_matrix(RSB)
        rsb_b = tape.reshape(rsb_m, (2, 1, 3, 3)) if isinstance(RSB, tape.Tensor) \
            else rsb_m.reshape(2, 1, 3, 3)
        del_imu = tape.reshape(DL[:2], (2, 1))
        if name == "keypoint":
            net = trajectory.trajectory_forward(P, t_v, T, net_cfg)
            mk, _, _, _ = body.fk_chain(tree, (S, O), net.theta)
            return objective.keypoint_loss(mk, p_cam, conf, net.camera)
        if name == "reproj":
            net = trajectory.trajectory_forward(P, t_v, T, net_cfg)
            mk, _, _, _ = body.fk_chain(tree, (S, O), net.theta)
            return objective.reprojection_loss(mk, x2d, conf, net.camera, intr)
        if name == "attitude":
            times = att_t + del_imu
            th, _, _, _ = trajectory.trajectory_raw(
                P, tape.reshape(times, (2 * n_f,)), T, net_cfg)
            th = tape.reshape(th, (2, n_f, tree.n_dofs))
            _, _, rot, _ = body.fk_chain(tree, (S, O), th, segments=seg_idx,
                                         want_markers=False)
            model_att = tape.stack([rot[seg_idx[i]][i] for i in range(2)])
            drift = so3.heading_graph(KN, times, T)
            pred = sensors.predicted_attitude(drift, att_read, rsb_b)
            return objective.attitude_loss(model_att, pred)
        if name == "gyro_sensor":
            times = gyro_t + del_imu
            th, _, thd, _ = trajectory.trajectory_raw(
                P, tape.reshape(times, (2 * n_f,)), T, net_cfg, with_rate=True)
            th = tape.reshape(th, (2, n_f, tree.n_dofs))
            thd = tape.reshape(thd, (2, n_f, tree.n_dofs))
            _, _, rot, rotd = body.fk_chain(tree, (S, O), th, theta_dot=thd,
                                            segments=seg_idx, want_markers=False)
            rsel = tape.stack([rot[seg_idx[i]][i] for i in range(2)])
            rdsel = tape.stack([rotd[seg_idx[i]][i] for i in range(2)])
            pred = sensors.predicted_sensor_gyro(rsb_b, rsel, rdsel)
            return objective.gyro_loss(pred, gyro_w)
        if name == "gyro_phone":
            t_p = ph_t + DL[2]
            net = trajectory.trajectory_forward(P, t_p, T, net_cfg,
                                                with_rate=True)
            pred = sensors.predicted_phone_gyro(net.camera, net.camera_dot)
            return objective.gyro_loss(pred, ph_w)
        if name == "smooth":
            t_pair = np.concatenate([t_s, t_s + 0.02])
            _, _, thd, _ = trajectory.trajectory_raw(P, t_pair, T, net_cfg,
                                                     with_rate=True)
            return objective.smoothness_loss(thd[:n_f], thd[n_f:])
        raise KeyError(name)

    arrays = {"phi": phi, "scales": scales, "offsets": offsets, "rsb": rsb,
              "knots": knots, "deltas": deltas}
    terms = ("keypoint", "reproj", "attitude", "gyro_sensor", "gyro_phone",
             "smooth")
    worst = {}
    h = 1e-6
    for name in terms:
        leaves = {k: tape.Tensor(v) for k, v in arrays.items()}
        out = term(name, leaves["phi"], leaves["scales"], leaves["offsets"],
                   leaves["rsb"], leaves["knots"], leaves["deltas"])
        tape.backward(out)

        def value(**kw):
            vals = {k: kw.get(k, arrays[k]) for k in arrays}
            return float(tape.value_of(term(
                name, vals["phi"], vals["scales"], vals["offsets"],
                vals["rsb"], vals["knots"], vals["deltas"])))

        err = 0.0
        for key, arr in arrays.items():
            grad = leaves[key].grad
            flat = arr.ravel()
            gf = (np.zeros_like(flat) if grad is None else grad.ravel())
            n_check = min(12, flat.size)
            for k in g.choice(flat.size, n_check, replace=False):
                fp, fm = flat.copy(), flat.copy()
                fp[k] += h
                fm[k] -= h
                fd = (value(**{key: fp.reshape(arr.shape)})
                      - value(**{key: fm.reshape(arr.shape)})) / (2 * h)
                scale = max(1e-8, abs(fd), abs(gf[k]))
                err = max(err, abs(fd - gf[k]) / scale)
        worst[name] = err

    dt = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and dt < 120.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    _report(3, "gradient checks vs finite differences",
            ok, f"max rel err per term (<1e-4): {detail}; runtime {dt:.0f}s (<120s)")


# -- criterion 4: closed-loop zero ----------------------------------------------


@pytest.fixture(scope="module")
def noiseless_setup():
    cfg = synth.ScenarioConfig()
    rec = synth.build_recording(cfg)
    tree = rec.tree()
    truth = synth.generate_trajectory(cfg, tree)
    return cfg, rec, tree, truth


def test_criterion_4_closed_loop_zero(noiseless_setup):
    cfg, rec, tree, truth = noiseless_setup
    cal = truth.calibration
    losses = {}
    frames = rec.keypoints
    pm = truth.markers(frames.t)
    camr = truth.camera_rot(frames.t)
    losses["keypoint"] = float(tape.value_of(objective.keypoint_loss(
        pm, frames.p_cam, frames.conf, camr)))
    losses["reproj"] = float(tape.value_of(objective.reprojection_loss(
        pm, frames.x2d, frames.conf, camr, rec.intrinsics)))
    att_terms, gy_pred, gy_meas = [], [], []
    for i, s in enumerate(rec.sensor_streams):
        seg = tree.segment_index(s.segment)
        rot = truth.segment_rotations(s.att_t + cal.imu_delta[i])[:, seg]
        pred = truth.predicted_attitude_for(s.sensor_id, s.att_matrices(),
                                            s.att_t)
        att_terms.append(float(tape.value_of(objective.attitude_loss(rot, pred))))
        r, rd = truth.segment_rotations(s.gyro_t + cal.imu_delta[i],
                                        with_rate=True)
        rsb = so3.quat_to_matrix(cal.rsb[i])
        gy_pred.append(sensors.predicted_sensor_gyro(rsb, r[:, seg], rd[:, seg]))
        gy_meas.append(s.gyro_w)
    losses["attitude"] = max(att_terms)
    camp, campd = truth.camera_rot(rec.phone.t + cal.phone_delta, with_rate=True)
    gs, gp = objective.gyro_losses(gy_pred, gy_meas,
                                   sensors.predicted_phone_gyro(camp, campd),
                                   rec.phone.w)
    losses["gyro_sensor"] = float(tape.value_of(gs))
    losses["gyro_phone"] = float(tape.value_of(gp))

    rep = evaluation.compute_residuals(truth, rec)
    residuals = rep.to_dict()
    ok = (all(v < 1e-10 for v in losses.values())
          and all(v < 1e-3 for v in residuals.values()))
    _report(4, "closed-loop zero at true parameters",
            ok,
            "losses " + ", ".join(f"{k}={v:.1e}" for k, v in losses.items())
            + " (<1e-10); residuals "
            + ", ".join(f"{k}={v:.1e}" for k, v in residuals.items())
            + " (<1e-3 in unit)")


# -- criterion 5: noiseless recovery ---------------------------------------------


@pytest.fixture(scope="module")
def recovery_fit(noiseless_setup):
    cfg, rec, tree, truth = noiseless_setup
    t0 = time.perf_counter()
    fit = objective.optimize(rec, tree, config=objective.OptimizerConfig(),
                             weights=objective.LossWeights(), mode="fusion")
    wall = time.perf_counter() - t0
    return fit, wall


def test_criterion_5_noiseless_recovery(noiseless_setup, recovery_fit):
    cfg, rec, tree, truth = noiseless_setup
    fit, wall = recovery_fit
    model = fit.model(tree)
    ts = evaluation.eval_times(cfg.duration_s, cfg.eval_rate_hz)
    rep = evaluation.compare_to_truth(model, truth, ["r_knee"], ts)
    knee = rep.joint_metric("r_knee", "mae_ma_deg")
    att_map = evaluation.attitude_map_error(model, truth, rec, ts)
    true_delta = np.array([s["delta_s"] for s in cfg.sensors])
    delta_err = np.abs(fit.calibration.imu_delta - true_delta).max()
    ok = knee < 1.0 and att_map < 2.0 and delta_err < 0.010
    _report(5, "noiseless recovery (default config, 20k steps)",
            ok,
            f"knee MAE-MA {knee:.3f} deg (<1.0), attitude map {att_map:.3f} deg "
            f"(<2.0), time-offset error {delta_err*1000:.1f} ms (<10), "
            f"fit wall time {wall/60:.1f} min (target <30 on a desktop CPU)")


# -- criterion 6: directional video-vs-fusion under noise -------------------------


def _comparison_scenario(seed, occlusion=None):
    base = synth.ScenarioConfig().to_dict()
    base["seed"] = seed
    base["keypoint_sigma_mm"] = 15.0
    base["attitude_noise_deg"] = 2.0
    base["gyro_noise_rad_s"] = 0.01
    base["occlusion"] = occlusion
    for s in base["sensors"]:
        s["delta_s"] = 0.02
    return synth.ScenarioConfig(**base)


def _fit_pair(cfg, steps=COMPARISON_STEPS):
    rec = synth.build_recording(cfg)
    tree = rec.tree()
    truth = synth.generate_trajectory(cfg, tree)
    ts = evaluation.eval_times(cfg.duration_s, cfg.eval_rate_hz)
    out = {}
    for mode in ("video", "fusion"):
        oc, w = objective.scaled_config(steps)
        oc.seed = cfg.seed
        fit = objective.optimize(rec, tree, config=oc, weights=w, mode=mode)
        rep = evaluation.compare_to_truth(fit.model(tree), truth,
                                          ["r_knee"], ts, mode=mode)
        out[mode] = rep
    return out


@pytest.fixture(scope="module")
def noisy_comparisons():
    results = []
    for seed in NOISY_SEEDS:
        results.append(_fit_pair(_comparison_scenario(seed)))
    return results


def test_criterion_6_noisy_fusion_beats_video(noisy_comparisons):
    video = [r["video"].joint_metric("r_knee", "mae_ma_deg")
             for r in noisy_comparisons]
    fusion = [r["fusion"].joint_metric("r_knee", "mae_ma_deg")
              for r in noisy_comparisons]
    med_v, iqr_v = evaluation.median_iqr(video)
    med_f, iqr_f = evaluation.median_iqr(fusion)
    ok = med_f < med_v
    _report(6, "noisy scenarios: fusion improves knee MAE-MA",
            ok,
            f"{len(video)} seeds, median knee MAE-MA fusion {med_f:.3f} "
            f"({iqr_f:.2f}) vs video {med_v:.3f} ({iqr_v:.2f}) deg; "
            f"strict ordering required")


# -- criterion 7: occlusion experiment -------------------------------------------


@pytest.fixture(scope="module")
def occlusion_comparisons():
    results = []
    for seed in OCCLUSION_SEEDS:
        results.append(_fit_pair(_comparison_scenario(
            seed, occlusion=[0.25, 0.75])))
    return results


def test_criterion_7_occlusion(occlusion_comparisons):
    video = [r["video"].joint_metric("r_knee", "pearson")
             for r in occlusion_comparisons]
    fusion = [r["fusion"].joint_metric("r_knee", "pearson")
              for r in occlusion_comparisons]
    med_v, _ = evaluation.median_iqr(video)
    med_f, _ = evaluation.median_iqr(fusion)
    ok = med_v < 0.9 and med_f > 0.95
    _report(7, "occluded middle half: sensors carry the knee",
            ok,
            f"{len(video)} seeds, median knee r video {med_v:.3f} (<0.9 "
            f"required), fusion {med_f:.3f} (>0.95 required)")


# -- criterion 8: determinism -----------------------------------------------------


def test_criterion_8_cli_determinism(tmp_path):
    from test_cli import run_cli, tree_bytes

    scen = tmp_path / "scenario.json"
    cfg = synth.ScenarioConfig(duration_s=2.0)
    cfg.save(scen)
    sims = []
    for name, env in (("s1", None), ("s2", {"KINEFUSE_THREADS": "4"})):
        out = tmp_path / name
        r = run_cli("simulate", "--scenario", str(scen), "--out", str(out),
                    env_extra=env)
        assert r.returncode == 0, r.stderr
        sims.append(tree_bytes(out))
    fits = []
    for name, env in (("f1", {"KINEFUSE_THREADS": "1"}), ("f2", None),
                      ("f3", {"KINEFUSE_THREADS": "8"})):
        out = tmp_path / name
        r = run_cli("fit", "--manifest", str(tmp_path / "s1" / "manifest.json"),
                    "--mode", "fusion", "--out", str(out), "--steps", "60",
                    "--seed", "5", env_extra=env)
        assert r.returncode == 0, r.stderr
        fits.append(tree_bytes(out))
    ok = len(set(sims)) == 1 and len(set(fits)) == 1
    _report(8, "byte-identical artifacts across runs and worker settings",
            ok,
            f"simulate digests equal: {len(set(sims)) == 1}; "
            f"fit digests equal across two runs and three thread caps: "
            f"{len(set(fits)) == 1}")
