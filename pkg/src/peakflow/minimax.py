"""Sampling of peak configurations, the sup-inf level S* and the minimax solve.

The pipeline:

1. ``sample_G`` lays a lattice over peak positions and coefficient slices.
   Configurations that fail the delta-apart condition (or put a boundary peak
   within delta of a corner) are kept and tagged as boundary samples.
2. ``estimate_S`` runs the flow from phi_Λ without freezing and records the
   lowest I_{s,eta} seen while the peaks stay attached to Λ; ``estimate_S_star``
   takes the maximum over interior samples.  Because S(Λ) <= I(phi_Λ),
   samples whose starting value is already below the running maximum cannot
   change it and are skipped.
3. ``solve`` installs the threshold S* - sigma, checks that boundary samples
   freeze immediately, runs the interior samples with freezing while checking
   containment and band traverses, and continues the sample that holds the
   level longest to a stationary state which is then certified.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .discretization import Field, Grid, write_pkfld
from .errors import EstimateFailed, InfeasibleG, InvalidParameters, MinimaxFailed, PeakflowError
from .flow import (
    LOST_TAGS,
    FlowParams,
    FlowState,
    RunOptions,
    equation_residual,
    remove_multiplier,
    residual,
    run,
    write_run_dir,
)
from .functionals import EtaParams, evaluate, reference_level
from .ground_state import RadialProfile
from .peaks import (
    BoundaryPoint,
    NormalizedConfig,
    PeakConfig,
    PeakTolerances,
    build_phi,
    delta_apart,
    edge_length,
    membership,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GSpec:
    """Peak counts, separation scale and lattice resolutions.

    ``pos_res`` points per position axis (per edge for boundary peaks) and
    ``coef_res`` levels per coefficient axis.
    """

    k: int
    l: int
    epsilon: float
    lengths: tuple = (1.0, 1.0)
    N: float = 2.0
    delta_hat: float = 0.1
    pos_res: int = 8
    coef_res: int = 3

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(v) for v in np.atleast_1d(self.lengths)))
        if self.k < 0 or self.l < 0 or self.k + self.l < 1:
            raise InvalidParameters(f"need k, l >= 0 and k + l >= 1, got k={self.k}, l={self.l}")
        if not self.epsilon > 0 or not self.N > 0:
            raise InvalidParameters("epsilon and N must be positive")
        if not 0 < self.delta_hat < 1:
            raise InvalidParameters("delta_hat must lie in (0, 1)")
        if self.pos_res < 2 or self.coef_res < 1:
            raise InvalidParameters("need pos_res >= 2 and coef_res >= 1")

    @property
    def delta(self) -> float:
        return self.N * self.epsilon

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def dimension(self) -> int:
        return (self.n + 1) * self.k + self.n * self.l - 1


class GSample(NamedTuple):
    index: int
    config: PeakConfig
    on_boundary: bool


def _interior_lattice(spec: GSpec):
    d = spec.delta
    axes = []
    for L in spec.lengths:
        if L - 2 * d <= 0:
            return []
        axes.append(np.linspace(d, L - d, spec.pos_res))
    return [tuple(float(c) for c in pt) for pt in itertools.product(*axes)]


def _boundary_lattice(spec: GSpec):
    if spec.n == 1:
        return [BoundaryPoint(0, 0.0), BoundaryPoint(1, 0.0)]
    d = spec.delta
    pts = []
    for edge in range(4):
        L = edge_length(spec.lengths, edge)
        if L - 2 * d <= 0:
            continue
        pts += [BoundaryPoint(edge, float(s)) for s in np.linspace(d, L - d, spec.pos_res)]
    return pts


def coefficient_slices(m: int, delta_hat: float, res: int) -> list:
    """Coefficient vectors of length ``m`` on the lattice 1 - dh + 2 dh j/(res + 1),
    j = 1..res, whose mean is 1."""
    if m == 1:
        return [(1.0,)]
    levels = [1.0 - delta_hat + 2.0 * delta_hat * j / (res + 1) for j in range(1, res + 1)]
    out = []
    for combo in itertools.product(levels, repeat=m):
        if abs(sum(combo) / m - 1.0) < 1e-12:
            out.append(tuple(combo))
    return out


def _corner_close(config: PeakConfig, delta: float) -> bool:
    if config.n == 1:
        return False
    for bp in config.boundary:
        L = edge_length(config.lengths, bp.edge)
        if not (delta < bp.s < L - delta):
            return True
    return False


def on_boundary_of_G(config: PeakConfig, delta: float) -> bool:
    return not delta_apart(config, delta).ok or _corner_close(config, delta)


def sample_G(spec: GSpec, grid: Grid | None = None, profile: RadialProfile | None = None) -> list:
    """Tensor lattice over positions and coefficient slices.

    Identical peaks are not ordered, so unordered combinations of lattice
    points are used.  Configurations on the closed lattice that violate the
    delta-apart condition are returned with ``on_boundary=True``.
    """
    if grid is not None and tuple(grid.lengths) != spec.lengths:
        raise InvalidParameters("grid and spec describe different domains")
    inner = _interior_lattice(spec) if spec.k else [()]
    bnd = _boundary_lattice(spec) if spec.l else [()]
    if spec.k and not inner or spec.l and not bnd:
        raise InfeasibleG(f"no room for the peaks at delta = {spec.delta:g} in {spec.lengths}")
    pos_i = list(itertools.combinations(inner, spec.k)) if spec.k else [()]
    pos_b = list(itertools.combinations(bnd, spec.l)) if spec.l else [()]
    coefs = coefficient_slices(spec.k + spec.l, spec.delta_hat, spec.coef_res)
    samples = []
    for pi, pb, c in itertools.product(pos_i, pos_b, coefs):
        cfg = PeakConfig(pi, pb, c[: spec.k], c[spec.k:], spec.epsilon, spec.lengths)
        samples.append(GSample(len(samples), cfg, on_boundary_of_G(cfg, spec.delta)))
    if not any(not s.on_boundary for s in samples):
        raise InfeasibleG(
            f"every configuration of k={spec.k}, l={spec.l} violates delta-apart at delta={spec.delta:g}")
    return samples


# -- S(Λ) and S* ------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Time horizons and cadences of the minimax pipeline."""

    t_horizon: float = 5.0
    t_track: float = 5.0
    t_final: float = 100.0
    membership_every: float = 0.25
    residual_tol: float = 1e-3
    prune: bool = True


class Estimate(NamedTuple):
    value: float
    I_phi: float
    records: int
    t_last: float


def _tracked_ok(verdict, cfg: PeakConfig, seed: PeakConfig, delta, delta_bar, delta_hat) -> bool:
    if verdict.diagnostic.startswith(LOST_TAGS):
        return False
    if not verdict.linf_gap < delta_bar:
        return False
    if not np.all(np.abs(np.asarray(verdict.normalized_coefficients) - 1.0) < delta_hat):
        return False
    move = np.linalg.norm(cfg.centres() - seed.centres(), axis=1)
    return bool(np.all(move <= 0.5 * delta))


def estimate_S(config: PeakConfig, params: FlowParams, t_horizon: float, profile: RadialProfile,
               grid: Grid, tolerances: PeakTolerances = PeakTolerances(),
               membership_every: float = 0.25) -> Estimate:
    """Lowest I_{s,eta} along the flow from phi_Λ while the peaks stay near Λ.

    The run has no freezing threshold.  A time counts only when the peaks are
    re-extracted within half a separation scale of their seeds with the L∞
    gap and coefficient box satisfied.
    """
    phi = build_phi(config, profile, grid)
    free = replace(params, threshold=None)
    delta = tolerances.delta(config.epsilon)
    delta_bar = tolerances.delta_bar(profile)
    opts = RunOptions(profile=profile, seeds=config, tolerances=tolerances,
                      membership_every=membership_every, on_tracking_lost="stop")
    best = math.inf
    count = 0
    t_last = 0.0

    def watch(state: FlowState):
        nonlocal best, count, t_last
        while state.verdicts[watch.seen:]:
            t, verdict = state.verdicts[watch.seen]
            watch.seen += 1
            cfg = dict(state.config_track).get(t, config)
            if not _tracked_ok(verdict, cfg, config, delta, delta_bar, tolerances.delta_hat):
                watch.stop = True
                return True
            row = next(r for r in reversed(state.history) if r.t <= t + 1e-12)
            best = min(best, row.I_s_eta)
            count += 1
            t_last = t
        return False

    watch.seen = 0
    watch.stop = False
    opts = replace(opts, stop_when=watch)
    state = run(phi, free, t_horizon, opts)
    if not watch.stop:
        watch(state)
    if count == 0:
        raise EstimateFailed("peaks were lost before any admissible record")
    return Estimate(best, state.history[0].I_s_eta, count, t_last)


def estimate_S_star(samples: Sequence, estimates: Sequence):
    """(S*, index) maximizing the estimates over interior samples; ``None``
    estimates are failed or skipped samples."""
    best, arg = -math.inf, None
    for s, e in zip(samples, estimates):
        if s.on_boundary or e is None:
            continue
        v = e.value if isinstance(e, Estimate) else float(e)
        if v > best:
            best, arg = v, s.index
    if arg is None:
        raise EstimateFailed("no interior sample produced an estimate")
    return best, arg


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


class _EstimateTask:
    def __init__(self, params, t_horizon, profile, grid, tolerances, every):
        self.args = (params, t_horizon, profile, grid, tolerances, every)

    def __call__(self, config):
        params, t_horizon, profile, grid, tolerances, every = self.args
        try:
            return estimate_S(config, params, t_horizon, profile, grid, tolerances, every)
        except PeakflowError as exc:
            log.info("estimate failed: %s", exc)
            return None


class SampleRecord(NamedTuple):
    index: int
    on_boundary: bool
    I_phi: float
    estimate: Optional[float]
    status: str


def sweep_S(samples, params: FlowParams, profile: RadialProfile, grid: Grid,
            schedule: Schedule = Schedule(), tolerances: PeakTolerances = PeakTolerances(),
            jobs: int = 1) -> list:
    """Estimate S(Λ) over the interior samples, skipping those that cannot
    raise the maximum.

    Samples are visited in decreasing order of I(phi_Λ); the skip decision
    only uses samples earlier in that order, so the result does not depend on
    ``jobs``.
    """
    I_phi = {}
    for s in samples:
        phi = build_phi(s.config, profile, grid)
        I_phi[s.index] = evaluate(phi, params.p, params.q, params.s_bar, params.eta_params).I_s_eta
    order = sorted((s for s in samples if not s.on_boundary), key=lambda s: (-I_phi[s.index], s.index))
    task = _EstimateTask(params, schedule.t_horizon, profile, grid, tolerances,
                         schedule.membership_every)
    records = {}
    best = -math.inf
    pos = 0
    while pos < len(order):
        batch = []
        j = pos
        while j < len(order) and len(batch) < max(1, jobs):
            if schedule.prune and I_phi[order[j].index] <= best:
                break
            batch.append(order[j])
            j += 1
        if not batch:
            break
        results = _map(task, [s.config for s in batch], jobs)
        for s, est in zip(batch, results):
            if schedule.prune and I_phi[s.index] <= best:
                records[s.index] = SampleRecord(s.index, False, I_phi[s.index], None, "skipped")
                continue
            if est is None:
                records[s.index] = SampleRecord(s.index, False, I_phi[s.index], None, "failed")
                continue
            records[s.index] = SampleRecord(s.index, False, I_phi[s.index], est.value, "estimated")
            best = max(best, est.value)
        pos += len(batch)
    for s in samples:
        if s.index not in records:
            status = "boundary" if s.on_boundary else "skipped"
            records[s.index] = SampleRecord(s.index, s.on_boundary, I_phi[s.index], None, status)
    return [records[s.index] for s in samples]


def S_star_from_records(records) -> tuple:
    vals = [(r.estimate, r.index) for r in records if r.estimate is not None and not r.on_boundary]
    if not vals:
        raise EstimateFailed("no interior sample produced an estimate")
    v, i = max(vals, key=lambda t: (t[0], -t[1]))
    return v, i


# -- T_t ------------------------------------------------------------------------------------

def track_T(config: PeakConfig, params: FlowParams, threshold: Optional[float], t: float,
            profile: RadialProfile, grid: Grid, tolerances: PeakTolerances = PeakTolerances(),
            on_boundary: Optional[bool] = None):
    """Λ'_t and the frozen flag after flowing phi_Λ for time ``t`` with freezing.

    Boundary samples and ``t = 0`` return the normalized seed unchanged.
    """
    seed = config.normalized()
    if on_boundary is None:
        on_boundary = on_boundary_of_G(config, tolerances.delta(config.epsilon))
    if on_boundary:
        return seed, True
    if t == 0:
        return seed, False
    frozen_params = replace(params, threshold=threshold)
    opts = RunOptions(profile=profile, seeds=config, tolerances=tolerances,
                      membership_every=t, on_tracking_lost="raise")
    state = run(build_phi(config, profile, grid), frozen_params, t, opts)
    if state.frozen and state.freeze_time == 0.0:
        return seed, True
    return state.config_track[-1][1], state.frozen


# -- solve ---------------------------------------------------------------------------------

@dataclass
class TrajectoryRecord:
    index: int
    frozen: bool
    freeze_time: Optional[float]
    time_above: float
    final_I: float
    containment_ok: bool
    failures: list = field(default_factory=list)
    violations: list = field(default_factory=list)


@dataclass
class Winner:
    index: int
    config: PeakConfig
    state: FlowState
    residual: float
    lam: float
    np_residual: float
    solution: Field
    verdict: object
    final_config: Optional[NormalizedConfig]
    I_final: float
    monotone: bool
    certified: bool
    notes: list = field(default_factory=list)


@dataclass
class MinimaxReport:
    spec: GSpec
    samples: list
    records: list
    S_star: float
    argmax: int
    sigma: float
    threshold: float
    boundary_check: float
    trajectories: list
    traverse_violations: list
    containment_failures: list
    winner: Optional[Winner]
    reference: float
    relative_gap: float
    second_pass_shift: Optional[float] = None
    failure: Optional[str] = None

    @property
    def samples_estimates(self):
        return [(s.config, r.estimate) for s, r in zip(self.samples, self.records)]


class _TrackTask:
    def __init__(self, params, profile, grid, tolerances, schedule, run_root):
        self.args = (params, profile, grid, tolerances, schedule, run_root)

    def __call__(self, sample):
        params, profile, grid, tolerances, schedule, run_root = self.args
        return _track_sample(sample, params, profile, grid, tolerances, schedule, run_root)


def _containment(state: FlowState, tolerances: PeakTolerances, threshold: float):
    """Unfrozen records above threshold must stay delta-apart and in the box."""
    fails = []
    delta = tolerances.delta(state.u.epsilon)
    rows = state.history
    for t, cfg in state.config_track:
        row = next(r for r in reversed(rows) if r.t <= t + 1e-12)
        if row.frozen or row.I_s_eta <= threshold:
            continue
        if not delta_apart(cfg, delta).ok:
            fails.append((t, "delta_apart"))
        if not np.all(np.abs(cfg.coefficients - 1.0) < tolerances.delta_hat):
            fails.append((t, "coefficients"))
    return fails


def _track_sample(sample: GSample, params, profile, grid, tolerances, schedule, run_root):
    phi = build_phi(sample.config, profile, grid)
    opts = RunOptions(profile=profile, seeds=sample.config, tolerances=tolerances,
                      membership_every=schedule.membership_every, on_tracking_lost="stop")
    state = run(phi, params, schedule.t_track, opts)
    threshold = params.threshold
    above = [r.t for r in state.history if r.I_s_eta > threshold and not r.frozen]
    time_above = (max(above) if above else 0.0) if not state.frozen else (state.freeze_time or 0.0)
    fails = _containment(state, tolerances, threshold)
    if state.tracking_lost and not state.frozen:
        fails.append((state.t, "tracking_lost"))
    viol = list(state.monitor_obj.violations) if state.monitor_obj is not None else []
    if run_root is not None:
        write_run_dir(state, params, os.path.join(run_root, f"sample_{sample.index:05d}"),
                      {"sample": sample.index})
    return TrajectoryRecord(sample.index, state.frozen, state.freeze_time, time_above,
                            state.report.I_s_eta, not fails, fails, viol)


def _certify(sample: GSample, params: FlowParams, profile, grid, tolerances, schedule,
             k: int, l: int) -> Winner:
    phi = build_phi(sample.config, profile, grid)
    check = {"next": schedule.t_horizon}

    def stationary(state: FlowState) -> bool:
        # a slow drift along the exponentially flat directions never meets the
        # u_t criterion, so stop once the equation itself is solved well enough
        if state.t < check["next"]:
            return False
        check["next"] = state.t + 1.0
        return residual(state, params)[0] <= 0.1 * schedule.residual_tol

    opts = RunOptions(profile=profile, seeds=sample.config, tolerances=tolerances,
                      membership_every=max(schedule.membership_every, 1.0),
                      on_tracking_lost="stop", stop_when=stationary)
    state = run(phi, params, schedule.t_final, opts)
    res, lam = residual(state, params)
    sol = remove_multiplier(state.u, lam, params.p, params.q)
    np_res = equation_residual(sol, params.p, params.q, params.s_bar, 1.0)
    seeds = state.seeds or sample.config
    verdict, cfg, norm = membership(state.u, profile, seeds, tolerances)
    I_vals = np.array([r.I_s_eta for r in state.history])
    monotone = bool(np.all(np.diff(I_vals) <= params.descent_tol))
    notes = []
    if state.frozen:
        notes.append(f"froze at t={state.freeze_time:.4g}")
    if not res <= schedule.residual_tol:
        notes.append(f"residual {res:.3e} above {schedule.residual_tol:g}")
    if not verdict.is_peak:
        notes.append(f"membership failed ({verdict.failing_condition}; {verdict.diagnostic})")
    if cfg.k != k or cfg.l != l:
        notes.append(f"found k={cfg.k}, l={cfg.l}")
    if not monotone:
        notes.append("trajectory not monotone")
    certified = not notes
    return Winner(sample.index, sample.config, state, res, lam, np_res, sol, verdict,
                  norm if not verdict.diagnostic.startswith(LOST_TAGS) else None,
                  state.report.I_s_eta, monotone, certified, notes)


def default_sigma(profile: RadialProfile) -> float:
    return 1e-4 * profile.S0


def solve(spec: GSpec, params: FlowParams, profile: RadialProfile, grid: Grid,
          schedule: Schedule = Schedule(), tolerances: PeakTolerances | None = None,
          jobs: int = 1, out_dir=None, raise_on_failure: bool = True) -> MinimaxReport:
    """Run the minimax pipeline for ``spec`` and certify the winner.

    ``params.sigma`` sets the freezing margin (0 means 1e-4 S0) and
    ``params.eta_params`` defaults to the cutoff scale (k + l/2) E_p.
    Raises :class:`MinimaxFailed` (carrying the report) when no trajectory
    holds the level or the winner fails its certificate.
    """
    if tolerances is None:
        tolerances = PeakTolerances(N=spec.N, delta_hat=spec.delta_hat)
    if params.epsilon != spec.epsilon:
        raise InvalidParameters("flow and sampling use different epsilon")
    sigma = params.sigma if params.sigma > 0 else default_sigma(profile)
    eta_params = params.eta_params or EtaParams.for_peaks(spec.k, spec.l, profile.E_p)
    base = replace(params, sigma=sigma, eta_params=eta_params, threshold=None)
    samples = sample_G(spec, grid, profile)

    # pass 1: S* without freezing
    records = sweep_S(samples, base, profile, grid, schedule, tolerances, jobs)
    S_star, argmax = S_star_from_records(records)
    threshold = S_star - sigma
    frozen_params = replace(base, threshold=threshold)

    # pass 2 on the maximizer: the level should move by less than sigma
    second = None
    try:
        est2 = estimate_S(samples[argmax].config, frozen_params, schedule.t_horizon, profile, grid,
                          tolerances, schedule.membership_every)
        second = abs(max(est2.value, threshold) - S_star)
    except PeakflowError as exc:
        log.info("second pass failed: %s", exc)

    # step 1: boundary samples freeze at once
    bnd = [r for r in records if r.on_boundary]
    frozen0 = sum(1 for r in bnd if r.I_phi <= threshold)
    boundary_check = frozen0 / len(bnd) if bnd else 1.0

    # steps 2-3: interior samples with freezing
    live = [s for s, r in zip(samples, records) if not s.on_boundary and r.I_phi > threshold]
    run_root = os.path.join(out_dir, "samples") if out_dir else None
    task = _TrackTask(frozen_params, profile, grid, tolerances, schedule, run_root)
    trajectories = _map(task, live, jobs)
    for s, r in zip(samples, records):
        if not s.on_boundary and r.I_phi <= threshold:
            trajectories.append(TrajectoryRecord(s.index, True, 0.0, 0.0, r.I_phi, True))
    trajectories.sort(key=lambda tr: tr.index)
    violations = [(tr.index, v) for tr in trajectories for v in tr.violations]
    containment = [(tr.index, f) for tr in trajectories for f in tr.failures]

    ref = reference_level(spec.k, spec.l, params.p, params.q, profile.S0)
    report = MinimaxReport(spec, samples, records, S_star, argmax, sigma, threshold, boundary_check,
                           trajectories, violations, containment, None, ref,
                           abs(S_star - ref) / profile.S0, second)

    # step 4: the sample holding the level longest
    holding = [tr for tr in trajectories if tr.time_above > 0 or not tr.frozen]
    if not holding:
        report.failure = "no sample maintains the level S* - sigma"
    else:
        best = max(holding, key=lambda tr: (not tr.frozen, tr.time_above, tr.final_I, -tr.index))
        report.winner = _certify(samples[best.index], frozen_params, profile, grid, tolerances,
                                 schedule, spec.k, spec.l)
        if not report.winner.certified:
            report.failure = "winner not certified: " + "; ".join(report.winner.notes)
    if out_dir is not None:
        write_report(report, out_dir)
    if report.failure and raise_on_failure:
        raise MinimaxFailed(report.failure, report=report)
    return report


def _config_label(cfg: PeakConfig) -> str:
    parts = []
    for i, (p, a) in enumerate(zip(cfg.interior, cfg.a)):
        parts.append(f"p{i + 1}=(" + ",".join(f"{x:.6g}" for x in p) + f");a{i + 1}={a:.6g}")
    for j, (q, b) in enumerate(zip(cfg.boundary, cfg.b)):
        parts.append(f"q{j + 1}=({q.edge},{q.s:.6g});b{j + 1}={b:.6g}")
    return ";".join(parts)


def write_report(report: MinimaxReport, out_dir) -> None:
    """minimax_report.csv, and for a winner solution.pkfld and certificate.txt."""
    os.makedirs(out_dir, exist_ok=True)
    traj = {tr.index: tr for tr in report.trajectories}
    with open(os.path.join(out_dir, "minimax_report.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "on_boundary", "config", "I_phi", "S_estimate", "status",
                     "frozen_at_start", "time_above", "final_I"])
        for s, r in zip(report.samples, report.records):
            tr = traj.get(s.index)
            wr.writerow([s.index, int(s.on_boundary), _config_label(s.config), repr(r.I_phi),
                         "" if r.estimate is None else repr(r.estimate), r.status,
                         int(r.I_phi <= report.threshold),
                         "" if tr is None else repr(tr.time_above),
                         "" if tr is None else repr(tr.final_I)])
    w = report.winner
    lines = [
        f"k = {report.spec.k}",
        f"l = {report.spec.l}",
        f"epsilon = {report.spec.epsilon!r}",
        f"S_star = {report.S_star!r}",
        f"sigma = {report.sigma!r}",
        f"threshold = {report.threshold!r}",
        f"reference_level = {report.reference!r}",
        f"relative_gap = {report.relative_gap!r}",
        f"boundary_frozen_fraction = {report.boundary_check!r}",
        f"traverse_violations = {len(report.traverse_violations)}",
        f"containment_failures = {len(report.containment_failures)}",
    ]
    if w is not None:
        write_pkfld(w.solution, os.path.join(out_dir, "solution.pkfld"), w.state.t)
        lines += [
            f"winner_sample = {w.index}",
            f"winner_seed = {_config_label(w.config)}",
            f"I_final = {w.I_final!r}",
            f"residual = {w.residual!r}",
            f"lambda = {w.lam!r}",
            f"residual_after_rescaling = {w.np_residual!r}",
            f"membership = {w.verdict.is_peak}",
            f"peaks = {_config_label(w.final_config) if w.final_config is not None else 'lost'}",
            f"certified = {w.certified}",
        ]
        lines += [f"note = {n}" for n in w.notes]
    if report.failure:
        lines.append(f"failure = {report.failure}")
    with open(os.path.join(out_dir, "certificate.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- the small-epsilon trend ------------------------------------------------------------------

def grid_for(epsilon: float, lengths, h_y: float = 0.2) -> Grid:
    """Grid whose spacing in stretched units does not exceed ``h_y``."""
    cells = tuple(max(8, int(math.ceil(L / (h_y * epsilon) - 1e-9))) for L in lengths)
    return Grid(tuple(lengths), cells)


class TrendRow(NamedTuple):
    epsilon: float
    S_star: float
    reference: float
    gap: float


class TrendResult(NamedTuple):
    rows: list
    monotone: bool
    final_ok: bool


def verify_theorem32(spec: GSpec, epsilons: Sequence[float], params: FlowParams,
                     profile: RadialProfile, schedule: Schedule = Schedule(),
                     h_y: float = 0.2, noise_floor: float = 0.01, final_tol: float = 0.1,
                     jobs: int = 1) -> TrendResult:
    """S* for each epsilon against (k + l/2)^{1 - p/q} S0.

    The relative gap must not grow by more than ``noise_floor`` from one
    epsilon to the next and must end below ``final_tol``.
    """
    eps = list(epsilons)
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise InvalidParameters("epsilon sequence must be decreasing")
    ref = reference_level(spec.k, spec.l, params.p, params.q, profile.S0)
    eta_params = params.eta_params or EtaParams.for_peaks(spec.k, spec.l, profile.E_p)
    rows = []
    for e in eps:
        sp_e = replace(spec, epsilon=e)
        grid = grid_for(e, spec.lengths, h_y)
        fp = replace(params, epsilon=e, threshold=None, eta_params=eta_params)
        samples = sample_G(sp_e, grid, profile)
        records = sweep_S(samples, fp, profile, grid, schedule,
                          PeakTolerances(N=spec.N, delta_hat=spec.delta_hat), jobs)
        S, _ = S_star_from_records(records)
        rows.append(TrendRow(e, S, ref, abs(S - ref) / profile.S0))
        log.info("epsilon=%g S*=%.6g gap=%.4g", e, S, rows[-1].gap)
    gaps = [r.gap for r in rows]
    monotone = all(b <= a + noise_floor for a, b in zip(gaps, gaps[1:]))
    return TrendResult(rows, monotone, gaps[-1] <= final_tol)
