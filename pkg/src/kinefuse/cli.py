"""Command-line entry point: simulate synthetic recordings, fit them, and
report comparisons against ground truth.

    kinefuse simulate --scenario cfg.json --out rec_dir [--seed N]
    kinefuse fit --manifest rec_dir/manifest.json --mode fusion --out fit_dir
    kinefuse report --fit fit_dir [--fit fit_dir2] --truth rec_dir/truth.json \
        --out report_dir

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 I/O failure. All randomness flows from --seed; repeated runs with the same
seed produce byte-identical artifacts. KINEFUSE_THREADS caps the worker pool
used by the linear algebra backend.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _configure_threads():
    """Pin the linear-algebra backend to one thread.

    BLAS reductions can differ bitwise between thread counts, and fit
    artifacts must be byte-identical regardless of worker settings, so the
    backend always runs single-threaded. KINEFUSE_THREADS caps any
    sample-parallel workers on top of that (the reference implementation
    evaluates batches sequentially, so the cap is an upper bound only).
    Must run before numpy is first imported.
    """
    for var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "OMP_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = "1"
    cap = os.environ.get("KINEFUSE_THREADS")
    if cap is not None and (not cap.isdigit() or int(cap) < 1):
        raise UsageError(f"KINEFUSE_THREADS must be a positive integer, "
                         f"got {cap!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kinefuse",
                description="monocular video + uncalibrated IMU fusion")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic recording")
    sim.add_argument("--scenario", help="scenario config JSON (default scenario "
                                        "when omitted)")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")

    fit = sub.add_parser("fit", help="fit a recording")
    fit.add_argument("--manifest", required=True, help="recording manifest path")
    fit.add_argument("--mode", choices=("video", "fusion"), default="fusion")
    fit.add_argument("--config", help="optimizer/loss config JSON")
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--seed", type=int, default=None, help="override config seed")
    fit.add_argument("--steps", type=int, default=None,
                     help="override step count (schedule scales with it)")

    rep = sub.add_parser("report", help="compare fits against ground truth")
    rep.add_argument("--fit", action="append", required=True, dest="fits",
                     help="fit output directory (repeatable)")
    rep.add_argument("--truth", required=True, help="ground-truth sidecar JSON")
    rep.add_argument("--out", required=True, help="report output directory")
    return p


def cmd_simulate(args) -> int:
    from . import synth

    if args.scenario:
        scenario = synth.ScenarioConfig.load(args.scenario)
    else:
        scenario = synth.ScenarioConfig()
    if args.seed is not None:
        scenario.seed = args.seed
    scenario.validate()
    os.makedirs(args.out, exist_ok=True)
    stats = synth.write_recording(scenario, args.out)
    print(f"wrote recording to {args.out}")
    print(f"  scenario hash : {stats['scenario_hash'][:16]}")
    print(f"  keypoint frames: {stats['frames']} @ {scenario.keypoint_rate_hz} Hz")
    for spec, n_att, n_gyro in zip(scenario.sensors, stats["attitude_samples"],
                                   stats["gyro_samples"]):
        print(f"  sensor {spec['id']} ({spec['segment']}): "
              f"{n_att} attitude @ {scenario.attitude_rate_hz} Hz, "
              f"{n_gyro} gyro @ {scenario.gyro_rate_hz} Hz")
    print(f"  phone gyro    : {stats['phone_samples']} @ "
          f"{scenario.phone_gyro_rate_hz} Hz")
    return EXIT_OK


def _load_fit_config(args):
    from . import objective

    cfg = objective.OptimizerConfig()
    weights = objective.LossWeights()
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        if "optimizer" in raw:
            cfg = objective.OptimizerConfig.from_dict(raw["optimizer"])
        if "weights" in raw:
            weights = objective.LossWeights.from_dict(raw["weights"])
    if args.steps is not None:
        cfg, weights = objective.scaled_config(args.steps, cfg, weights)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    weights.validate()
    return cfg, weights


def cmd_fit(args) -> int:
    from . import evaluation, objective, recording as rec_mod

    cfg, weights = _load_fit_config(args)
    rec = rec_mod.load_recording(args.manifest, mode=args.mode)
    tree = rec.tree()
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "fit.log")
    t0 = time.perf_counter()
    with open(log_path, "w") as log:
        def progress(step, losses):
            line = f"step {step:6d}  " + "  ".join(
                f"{k}={v:.6e}" for k, v in losses.items() if v == v)
            log.write(line + "\n")
            log.flush()
            print(line)

        result = objective.optimize(rec, tree, config=cfg, weights=weights,
                                    mode=args.mode, progress=progress)
        wall = time.perf_counter() - t0
        log.write(f"wall_time_s {wall:.3f}\n")
    result.save(args.out)
    print(f"fit complete in {wall:.1f} s; artifacts in {args.out}")
    res = result.residuals
    for name, value, unit in (
        ("keypoint", res.keypoint_cm, "cm"),
        ("reprojection", res.reproj_px, "px"),
        ("phone gyro", res.phone_gyro_deg_s, "deg/s"),
        ("sensor gyro", res.sensor_gyro_deg_s, "deg/s"),
        ("attitude", res.attitude_deg, "deg"),
    ):
        print(f"  {name:13s}: " + ("-" if value is None else f"{value:.3f} {unit}"))
    return EXIT_OK


def cmd_report(args) -> int:
    from . import evaluation, objective, synth

    scenario, truth_hash = synth.load_truth(args.truth)
    tree = None
    truth = None
    reports = []
    fits = {}
    for fit_dir in args.fits:
        for required in ("checkpoint.bin", "summary.json"):
            if not os.path.exists(os.path.join(fit_dir, required)):
                raise FileNotFoundError(
                    f"{fit_dir}: missing fit artifact {required}")
        fit = objective.FitResult.load(fit_dir)
        if fit.scenario_hash != truth_hash:
            raise UsageError(
                f"{fit_dir}: fit scenario hash {str(fit.scenario_hash)[:12]} "
                f"does not match ground truth {truth_hash[:12]}")
        if truth is None:
            truth = synth.generate_trajectory(scenario)
            tree = truth.tree
        model = fit.model(tree)
        ts = evaluation.eval_times(scenario.duration_s, scenario.eval_rate_hz)
        joints = evaluation.default_joints(scenario)
        rep = evaluation.compare_to_truth(model, truth, joints, ts,
                                          mode=fit.mode,
                                          scenario_hash=fit.scenario_hash)
        rec = synth.build_recording(scenario, tree)
        rep.attitude_map_deg = evaluation.attitude_map_error(model, truth, rec, ts)
        reports.append(rep)
        fits[fit.mode] = rep

    os.makedirs(args.out, exist_ok=True)
    payload = {"scenario_hash": truth_hash,
               "reports": [r.to_dict() for r in reports]}
    if "fusion" in fits and "video" in fits:
        payload["delta_fusion_minus_video"] = evaluation.paired_delta(
            fits["fusion"], fits["video"])
    evaluation.write_comparison_json(os.path.join(args.out, "report.json"),
                                     payload)
    evaluation.write_comparison_csv(os.path.join(args.out, "report.csv"),
                                    reports)
    for rep in reports:
        for j in rep.joints:
            r_s = "-" if j.pearson is None else f"{j.pearson:.4f}"
            print(f"{rep.mode:6s} {j.joint:8s} mae={j.mae_deg:7.3f} "
                  f"mae_ma={j.mae_ma_deg:7.3f} r={r_s}")
    print(f"report written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _configure_threads()
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "report":
            return cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FileNotFoundError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # config/value errors vs numeric failures
        from . import objective

        if isinstance(e, objective.DivergenceError):
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(e, (ValueError, KeyError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
