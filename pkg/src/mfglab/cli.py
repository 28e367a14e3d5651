"""Command-line front end.

Subcommands:

    mono-check <model>            monotonicity certification gate
    fixed-point <model> --demo    best-response fixed points on a demo cloud
    solve-mf <model> <config>     one mean-field solve, paths exported
    solve-np <model> <config>     one finite-player solve, paths exported
    lq-compare <model> <config>   solver versus closed-form coefficients
    rate-ol <config>              open-loop convergence sweep
    rate-cl <config>              open-loop versus closed-loop gap sweep

Every subcommand writes a deterministic report.json (no timestamps) plus
format-selectable tables into --out, and prints a short human summary.
"""

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import lq
from .config import load_config, load_model
from .fbsde import SchemeConfig, generate_paths, solve_meanfield, solve_nplayer
from .fixedpoint import phi_an_discrepancy, solve_a_n, solve_phi
from .harness import run_closedloop_gap, run_openloop_convergence, write_report
from .measures import EmpiricalMeasure
from .monotonicity import certify


def _write_json(out_dir, name, payload):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _apply_overrides(config, args):
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.dt is not None:
        changes["dt"] = args.dt
    if changes:
        config = dataclasses.replace(config, **changes)
    return config


def cmd_mono_check(args):
    model = load_model(args.model)
    cert = certify(model, args.players, trials=args.trials, seed=args.seed or 0)
    _write_json(args.out, "report.json", cert.as_dict())
    rep = cert.report
    print("C_La   = %.6g" % rep.c_la)
    print("C_Lx   = %.6g" % rep.c_lx)
    print("C_G    = %.6g" % rep.c_g)
    print("C_disp = %.6g" % rep.c_disp)
    print("finite-N margin (N=%d) = %.6g" % (args.players, cert.finite_n_margin))
    print("control coercivity     = %.6g" % cert.coercivity)
    print("gate: %s" % ("PASS" if cert.passed else "FAIL"))
    return 0 if cert.passed else 2


def cmd_fixed_point(args):
    model = load_model(args.model)
    rng = np.random.default_rng(args.seed or 0)
    n = args.players
    x = rng.uniform(-1.0, 1.0, size=(n, model.dim))
    p = rng.uniform(-1.0, 1.0, size=(n, model.dim))

    nu = solve_phi(model, EmpiricalMeasure(x, p))
    a_n = solve_a_n(model, x, p)
    disc = phi_an_discrepancy(model, x, p)
    payload = {
        "players": n,
        "phi_controls": nu.a.tolist(),
        "a_n_controls": a_n.tolist(),
        "discrepancy_w2sq": disc,
        "discrepancy_normalized": disc / float(np.mean(np.sum(x * x + p * p, axis=1))),
    }
    _write_json(args.out, "report.json", payload)
    print("phi and a^N solved on a %d-point cloud" % n)
    print("d2^2(phi cloud, a^N cloud) = %.3e" % disc)
    return 0


def _demo_solve(args, variant):
    model = load_model(args.model)
    config = _apply_overrides(load_config(args.config), args)
    seed = config.seeds[0]
    particles = config.ref_particles if variant == "meanfield" else max(config.n_list)
    bundle = generate_paths(seed=seed, particles=particles, steps=config.steps, model=model)
    t0 = time.time()
    if variant == "meanfield":
        sol = solve_meanfield(model, config.m0, bundle)
    else:
        sol = solve_nplayer(model, config.m0, bundle)
    wall = time.time() - t0

    os.makedirs(args.out, exist_ok=True)
    if args.format == "csv":
        tpath = os.path.join(args.out, "paths.csv")
        sol.export_csv(tpath)
    else:
        tpath = os.path.join(args.out, "paths.json")
        sol.export_summary(tpath)
    report = dict(sol.summary())
    report["seed"] = seed
    report["paths_file"] = os.path.basename(tpath)
    _write_json(args.out, "report.json", report)
    print(
        "%s solve: %d particles, %d steps, %d sweeps, terminal residual %.2e (%.1f s)"
        % (variant, particles, config.steps, sol.iterations, sol.terminal_residual, wall)
    )
    print("wrote %s" % tpath)
    return 0


def cmd_solve_mf(args):
    return _demo_solve(args, "meanfield")


def cmd_solve_np(args):
    return _demo_solve(args, "nplayer")


def cmd_lq_compare(args):
    model = load_model(args.model)
    config = _apply_overrides(load_config(args.config), args)
    seed = config.seeds[0]
    scheme = SchemeConfig(picard_tol=1e-12, recenter_idio=True)

    mf = lq.riccati_meanfield(model)
    n = max(config.n_list)
    npr = lq.riccati_nplayer(model, n)
    bundle = generate_paths(seed=seed, particles=n, steps=config.steps, model=model)

    sol = solve_meanfield(model, config.m0, bundle, scheme=scheme)
    x0 = sol.x_paths[:, 0, :]
    pred = mf.P[0] * x0 + mf.Q[0] * x0.mean(axis=0)
    dev_mf = float(np.max(np.abs(sol.y_paths[:, 0, :] - pred)) / np.max(np.abs(pred)))

    sol = solve_nplayer(model, config.m0, bundle, scheme=scheme)
    x0 = sol.x_paths[:, 0, :]
    loo = (x0.sum(axis=0) - x0) / (n - 1)
    pred = npr.p[0] * x0 + npr.q[0] * loo
    dev_np = float(np.max(np.abs(sol.y_paths[:, 0, :] - pred)) / np.max(np.abs(pred)))

    os.makedirs(args.out, exist_ok=True)
    mf.to_csv(os.path.join(args.out, "meanfield_coeffs.csv"))
    npr.to_csv(os.path.join(args.out, "nplayer_coeffs.csv"))
    lq.riccati_closedloop(model, n).to_csv(os.path.join(args.out, "closedloop_coeffs.csv"))

    bounds = {str(m): lq.a_matrix_bound(model, m) for m in config.n_list}
    residual = lq.nash_pde_residual(model, min(config.n_list))
    payload = {
        "meanfield_y0_rel_dev": dev_mf,
        "nplayer_y0_rel_dev": dev_np,
        "players": n,
        "seed": seed,
        "a_matrix_bounds": bounds,
        "nash_pde_residual": residual,
    }
    _write_json(args.out, "report.json", payload)
    print("Y0 relative deviation: mean-field %.3e, %d-player %.3e" % (dev_mf, n, dev_np))
    print("feedback-matrix bound over N: %s" % ", ".join("%.6f" % v for v in bounds.values()))
    print("dynamic-programming residual: %.3e" % residual)
    return 0


def _rate_cmd(args, runner):
    config = _apply_overrides(load_config(args.config), args)
    t0 = time.time()
    report = runner(config, progress=(print if args.verbose else None))
    wall = time.time() - t0
    paths = write_report(report, args.out, fmt=args.format, timing=wall)
    for metric, info in sorted(report.slopes.items()):
        print("%s: slope %.3f (CI %.3f .. %.3f)" % (metric, info["slope"], *info["ci"]))
    for name, chk in sorted(report.checks.items()):
        print("[%s] %s" % ("PASS" if chk["ok"] else "FAIL", name))
    print("wrote %s" % ", ".join(paths))
    return 0


def cmd_rate_ol(args):
    return _rate_cmd(args, run_openloop_convergence)


def cmd_rate_cl(args):
    return _rate_cmd(args, lambda config, progress: run_closedloop_gap(config, progress=progress))


def build_parser():
    parser = argparse.ArgumentParser(prog="mfglab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, config=False):
        if model:
            p.add_argument("model", help="model file")
        if config:
            p.add_argument("config", help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--dt", type=float, default=None, help="override the time step")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("mono-check", help="monotonicity certification gate")
    common(p, model=True)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--players", type=int, default=8)
    p.set_defaults(func=cmd_mono_check)

    p = sub.add_parser("fixed-point", help="best-response fixed points on a demo cloud")
    common(p, model=True)
    p.add_argument("--demo", action="store_true", help="run the built-in demonstration cloud")
    p.add_argument("--players", type=int, default=16)
    p.set_defaults(func=cmd_fixed_point)

    p = sub.add_parser("solve-mf", help="one mean-field solve with path export")
    common(p, model=True, config=True)
    p.set_defaults(func=cmd_solve_mf)

    p = sub.add_parser("solve-np", help="one finite-player solve with path export")
    common(p, model=True, config=True)
    p.set_defaults(func=cmd_solve_np)

    p = sub.add_parser("lq-compare", help="solver versus closed-form coefficients")
    common(p, model=True, config=True)
    p.set_defaults(func=cmd_lq_compare)

    p = sub.add_parser("rate-ol", help="open-loop convergence sweep")
    common(p, config=True)
    p.set_defaults(func=cmd_rate_ol)

    p = sub.add_parser("rate-cl", help="open-loop versus closed-loop gap sweep")
    common(p, config=True)
    p.set_defaults(func=cmd_rate_cl)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = os.path.join("out", args.command)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, AssertionError) as err:
        print("error: %s" % err, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
