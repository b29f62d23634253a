"""Command-line interface: ``peakflow {ground-state,flow,minimax,verify}``.

Exit codes: 0 ok, 1 configuration or validation error, 2 solver error,
3 descent violation, 4 minimax failed, 5 verification failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from .discretization import Grid, read_pkfld, write_pkfld
from .errors import DescentViolation, InvalidParameters, MinimaxFailed, PeakflowError
from .flow import FlowParams, RunOptions, initial_state, residual, run, snapshot_writer, write_run_dir
from .functionals import EtaParams
from .ground_state import ProblemParams, decay_rate, find_ground_state, write_profile_csv
from .minimax import GSpec, Schedule, grid_for, solve, verify_theorem32
from .peaks import BoundaryPoint, PeakConfig, PeakTolerances, build_phi, read_config
from .verify import run_all

log = logging.getLogger("peakflow")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DESCENT, EXIT_MINIMAX, EXIT_VERIFY = range(6)


def _global_flags(parser, defaults: bool):
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--config", default=d(None), help="run configuration file")
    parser.add_argument("--out", default=d(None), help="output directory (overrides io.out)")
    parser.add_argument("--jobs", type=int, default=d(os.cpu_count() or 1),
                        help="worker processes for sweeps")
    parser.add_argument("--log-level", default=d("WARNING"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peakflow", description=__doc__.splitlines()[0])
    _global_flags(parser, True)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, False)

    sub.add_parser("ground-state", parents=[common], help="radial ground state and S0")

    fl = sub.add_parser("flow", parents=[common], help="run the descent flow from a peak configuration")
    fl.add_argument("--snapshot", help="resume from a PKFLD snapshot")
    fl.add_argument("--threshold", type=float, help="freezing level (overrides flow.threshold)")
    fl.add_argument("--t-end", type=float, help="final time (overrides flow.t_end)")

    mm = sub.add_parser("minimax", parents=[common], help="sample G, estimate S* and solve")
    mm.add_argument("--verify-theorem32", metavar="EPS_LIST",
                    help="comma-separated decreasing epsilons: only run the S* trend check")

    vf = sub.add_parser("verify", parents=[common], help="run the property suites")
    vf.add_argument("--mutate-h", action="store_true",
                    help="inject a fault into the H second-derivative formula")
    vf.add_argument("--dt-safety", type=float, default=0.9,
                    help="step safety factor used by the descent suite")
    return parser


def _load(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    if args.out:
        cfg.io.out = args.out
    return cfg


def _problem(cfg) -> ProblemParams:
    pr = cfg.problem
    return ProblemParams(pr.n, pr.p, pr.q)


def _grid(cfg) -> Grid:
    dom = cfg.domain
    lengths = tuple(dom.lengths)
    if len(lengths) != cfg.problem.n:
        raise InvalidParameters(f"domain has {len(lengths)} axes but n = {cfg.problem.n}")
    if any(c > 0 for c in dom.cells):
        return Grid(lengths, tuple(dom.cells))
    return grid_for(cfg.problem.epsilon, lengths, dom.h_y)


def _tolerances(cfg) -> PeakTolerances:
    c = cfg.constants
    return PeakTolerances(c.N, c.delta_bar_factor, c.delta_hat, c.energy_cap_factor,
                          c.holder_gamma, c.holder_cap_factor)


def _flow_params(cfg, profile, k, l, threshold=None) -> FlowParams:
    c, f = cfg.constants, cfg.flow
    return FlowParams(cfg.problem.p, cfg.problem.q, cfg.problem.epsilon, s_bar=c.s_bar,
                      sigma=c.sigma, threshold=threshold, dt_safety=f.dt_safety,
                      eta_params=EtaParams.for_peaks(k, l, profile.E_p), scheme=f.scheme,
                      dt_max=f.dt_max, descent_tol=c.descent_tol, conv_tol=f.conv_tol,
                      conv_steps=f.conv_steps)


def _ground_state(cfg):
    return find_ground_state(_problem(cfg), tol=cfg.constants.tail_tol)


def _persist(cfg, profile, out):
    os.makedirs(out, exist_ok=True)
    cfgmod.write_config(cfgmod.materialize(cfg, profile.S0), os.path.join(out, "config.ini"))


def cmd_ground_state(cfg, args) -> int:
    params = _problem(cfg)
    profile = _ground_state(cfg)
    fit = decay_rate(profile)
    out = cfg.io.out
    _persist(cfg, profile, out)
    write_profile_csv(profile, os.path.join(out, "profile.csv"))
    print(f"beta={profile.beta:.6f}")
    print(f"E_p={profile.E_p:.6f}")
    print(f"M_q={profile.M_q:.6f}")
    print(f"S0={profile.S0:.6f}")
    print(f"decay_rate={fit.rate:.6f} target={params.target_decay_rate:.6f}")
    if params.warning:
        print("warning: outside 1 < p < n, q < np/(n - p); the profile is computed anyway")
    return EXIT_OK


def _initial_config(cfg) -> PeakConfig:
    ini = cfg.initial
    if ini.peaks:
        if not os.path.isfile(ini.peaks):
            raise cfgmod.ConfigError(f"config not found: {ini.peaks}")
        return read_config(ini.peaks)
    interior = [tuple(float(x) for x in part.split(",")) for part in ini.interior.split(";") if part.strip()]
    boundary = []
    for part in ini.boundary.split(";"):
        if part.strip():
            edge, _, s = part.partition(":")
            boundary.append(BoundaryPoint(int(edge), float(s or 0.0)))
    a = [float(x) for x in ini.a.split(",") if x.strip()] or [1.0] * len(interior)
    b = [float(x) for x in ini.b.split(",") if x.strip()] or [1.0] * len(boundary)
    if not interior and not boundary:
        raise cfgmod.ConfigError("flow needs [initial] peaks, interior/boundary points or a snapshot")
    return PeakConfig(interior, boundary, a, b, cfg.problem.epsilon, tuple(cfg.domain.lengths))


def cmd_flow(cfg, args) -> int:
    profile = _ground_state(cfg)
    threshold = args.threshold if args.threshold is not None else cfg.flow.threshold
    t_end = args.t_end if args.t_end is not None else cfg.flow.t_end
    snapshot = args.snapshot or cfg.initial.snapshot
    seeds = None
    if snapshot:
        if not os.path.isfile(snapshot):
            raise cfgmod.ConfigError(f"config not found: snapshot {snapshot}")
        u, t0 = read_pkfld(snapshot)
        if u.epsilon != cfg.problem.epsilon:
            raise InvalidParameters("snapshot epsilon differs from the configuration")
        k = l = None
    else:
        seeds = _initial_config(cfg)
        u = build_phi(seeds, profile, _grid(cfg))
        t0 = 0.0
        k, l = seeds.k, seeds.l
    params = _flow_params(cfg, profile, k if k is not None else cfg.minimax.k,
                          l if l is not None else cfg.minimax.l, threshold)
    out = cfg.io.out
    _persist(cfg, profile, out)
    callbacks = (snapshot_writer(out),) if cfg.io.snapshot_every > 0 else ()
    opts = RunOptions(profile=profile if seeds is not None else None, seeds=seeds,
                      tolerances=_tolerances(cfg), membership_every=cfg.flow.membership_every,
                      on_tracking_lost="stop", snapshot_every=cfg.io.snapshot_every or None,
                      callbacks=callbacks)
    state = initial_state(u, params, t0)
    try:
        state = run(u, params, t_end, opts, state=state)
    except DescentViolation as exc:
        if exc.state is not None:
            write_pkfld(exc.state.u, os.path.join(out, "descent_violation.pkfld"), exc.state.t)
        raise
    write_run_dir(state, params, out, {"resumed_from": snapshot or "none"})
    res, lam = residual(state, params)
    if state.frozen and state.freeze_time == t0:
        print(f"frozen at t={t0:g}")
    print(f"t={state.t:.6g}")
    print(f"I_s_eta={state.report.I_s_eta:.8g}")
    print(f"lambda={lam:.8g}")
    print(f"residual={res:.3e}")
    print(f"frozen={state.frozen}")
    if state.tracking_lost:
        print("peaks lost during the run")
    return EXIT_OK


def _gspec(cfg) -> GSpec:
    m, c = cfg.minimax, cfg.constants
    return GSpec(m.k, m.l, cfg.problem.epsilon, tuple(cfg.domain.lengths), c.N, c.delta_hat,
                 m.pos_res, m.coef_res)


def _schedule(cfg) -> Schedule:
    m = cfg.minimax
    return Schedule(m.t_horizon, m.t_track, m.t_final, cfg.flow.membership_every,
                    m.residual_tol, m.prune)


def cmd_minimax(cfg, args) -> int:
    profile = _ground_state(cfg)
    spec = _gspec(cfg)
    params = _flow_params(cfg, profile, spec.k, spec.l)
    out = cfg.io.out
    _persist(cfg, profile, out)
    if args.verify_theorem32:
        try:
            eps = [float(x) for x in args.verify_theorem32.split(",") if x.strip()]
        except ValueError:
            raise cfgmod.ConfigError(f"bad epsilon list {args.verify_theorem32!r}") from None
        trend = verify_theorem32(spec, eps, params, profile, _schedule(cfg), cfg.domain.h_y,
                                 jobs=args.jobs)
        print("epsilon,S_star,reference,relative_gap")
        for r in trend.rows:
            print(f"{r.epsilon!r},{r.S_star:.8g},{r.reference:.8g},{r.gap:.5f}")
        ok = trend.monotone and trend.final_ok
        print(f"gap non-increasing: {trend.monotone}; final gap within 10%: {trend.final_ok}")
        return EXIT_OK if ok else EXIT_MINIMAX
    try:
        report = solve(spec, params, profile, _grid(cfg), _schedule(cfg), _tolerances(cfg),
                       jobs=args.jobs, out_dir=out)
    except MinimaxFailed as exc:
        rep = exc.report
        if rep is not None:
            print(f"S*={rep.S_star:.8g} reference={rep.reference:.8g} gap={rep.relative_gap:.5f}")
            best = max(rep.trajectories, key=lambda tr: (tr.time_above, tr.final_I), default=None)
            if best is not None:
                print(f"best trajectory: sample {best.index}, held the level for t={best.time_above:.4g}, "
                      f"final I={best.final_I:.8g}")
        raise
    w = report.winner
    print(f"S*={report.S_star:.8g}")
    print(f"reference={report.reference:.8g}")
    print(f"gap={report.relative_gap:.5f}")
    print(f"boundary samples frozen at start: {report.boundary_check:.0%}")
    print(f"winner: sample {w.index}, I={w.I_final:.8g}, residual={w.residual:.3e}, "
          f"lambda={w.lam:.6g}, certified={w.certified}")
    return EXIT_OK


def cmd_verify(cfg, args) -> int:
    def show(res):
        print(f"{'PASS' if res.passed else 'FAIL'} {res.name}: {res.detail}")

    results = run_all(mutate_h=args.mutate_h, dt_safety=args.dt_safety, report=show)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {
    "ground-state": cmd_ground_state,
    "flow": cmd_flow,
    "minimax": cmd_minimax,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except PeakflowError as exc:
        print(f"error [{exc.tag}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
