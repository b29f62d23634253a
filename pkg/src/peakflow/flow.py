"""Descent flow for I_{s,eta} with the nonlocal coefficient lambda.

In stretched coordinates y = x / eps the flow reads

    u_t = Δ_{p,s} u + lambda(t) u^{q-1} - u^{p-1},    lambda = eta(A) / (eta'(A) B),

with zero-flux faces.  Because the discrete operator is the exact gradient of
the discrete energy, the semi-discrete flow satisfies

    d/dt I_{s,eta}(u) = -(p eta'(A) / B^{p/q}) ∫ u_t^2 dy.

Two time integrators are provided.  ``explicit`` is forward Euler for the
diffusion and growth terms with the absorption u^{p-1} = u^{p-2} u taken
linearly implicit, which keeps the update positive and avoids the unbounded
reaction stiffness of u^{p-1} near u = 0 when p < 2.  ``semi_implicit`` also
treats the diffusion implicitly with face coefficients frozen at the old
state, allowing steps of order 0.1 instead of 1e-4.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import (
    Field,
    diffusion_matrix,
    face_coefficients,
    p_laplacian_values,
    write_pkfld,
)
from .errors import DescentViolation, InvalidParameters, NumericalOverflow, PeakTrackingLost
from .functionals import EtaParams, FunctionalReport, energy_terms, report_from_terms
from .peaks import PeakConfig, PeakTolerances, PeakVerdict, membership

log = logging.getLogger(__name__)

SCHEMES = ("explicit", "semi_implicit")

#: membership diagnostics meaning the peaks could not be re-extracted
LOST_TAGS = ("centre_not_found", "centre_not_converged", "ill_conditioned_fit",
             "corner_excluded", "degenerate_field")


@dataclass(frozen=True)
class FlowParams:
    """Parameters of one flow run.

    ``s_bar`` is the regularizer in stretched coordinates (the x-coordinate
    value is ``s = s_bar / eps^2``).  ``threshold`` is the freezing level
    S* - sigma; ``None`` disables freezing.
    """

    p: float
    q: float
    epsilon: float
    s_bar: float = 1e-8
    sigma: float = 0.0
    threshold: Optional[float] = None
    dt_safety: float = 0.9
    eta_params: Optional[EtaParams] = None
    scheme: str = "explicit"
    dt_max: float = 0.1
    descent_tol: float = 1e-8
    conv_tol: float = 1e-6
    conv_steps: int = 100

    def __post_init__(self):
        if not (self.q > self.p > 1):
            raise InvalidParameters(f"need q > p > 1, got p={self.p}, q={self.q}")
        if not self.epsilon > 0:
            raise InvalidParameters("epsilon must be positive")
        if self.s_bar < 0:
            raise InvalidParameters("s_bar must be nonnegative")
        if self.sigma < 0:
            raise InvalidParameters("sigma must be nonnegative")
        if not self.dt_safety > 0:
            raise InvalidParameters("dt_safety must be positive")
        if self.scheme not in SCHEMES:
            raise InvalidParameters(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    @property
    def s(self) -> float:
        return self.s_bar / self.epsilon ** 2


class HistoryRow(NamedTuple):
    t: float
    A: float
    B: float
    I_s: float
    I_s_eta: float
    lam: float
    dt: float = 0.0
    dissipation: float = 0.0
    clipped: float = 0.0
    frozen: bool = False


@dataclass
class FlowState:
    """Current field, time and the record of the run so far.

    ``history`` is append-only and shared between the successive states of a
    run; its last row always describes ``u``.
    """

    u: Field
    t: float = 0.0
    frozen: bool = False
    freeze_time: Optional[float] = None
    history: list = field(default_factory=list)
    config_track: list = field(default_factory=list)
    monitor: list = field(default_factory=list)
    converged: bool = False
    quiet_steps: int = 0
    seeds: Optional[PeakConfig] = None
    verdicts: list = field(default_factory=list)
    monitor_obj: Optional["TraverseMonitor"] = None
    tracking_lost: bool = False

    @property
    def report(self) -> FunctionalReport:
        r = self.history[-1]
        return FunctionalReport(r.A, r.B, r.I_s, r.I_s_eta, r.lam)


def _hs(u: Field, eps):
    return [h / eps for h in u.grid.h]


def _report(u: Field, params: FlowParams) -> FunctionalReport:
    A, B = energy_terms(u, params.p, params.q, params.s_bar)
    return report_from_terms(A, B, params.p, params.q, params.eta_params)


def initial_state(u: Field, params: FlowParams, t: float = 0.0) -> FlowState:
    if np.any(u.values < 0):
        raise InvalidParameters("initial field must be nonnegative")
    rep = _report(u, params)
    state = FlowState(u=u, t=t)
    frozen = params.threshold is not None and rep.I_s_eta <= params.threshold
    state.history.append(HistoryRow(t, *rep, frozen=frozen))
    if frozen:
        state.frozen = True
        state.freeze_time = t
    return state


def stable_dt(state: FlowState, params: FlowParams) -> float:
    """Largest step allowed for the explicit scheme.

    Diffusion: dt_safety h^2 / (2 n c_max) with c the face diffusivity (scaled
    by p - 1 when p > 2, the Jacobian bound).  Reaction: dt_safety divided by
    (q - 1) lambda max u^{q-2}, plus (p - 1) max u^{p-2} when p >= 2.  For
    p < 2 the absorption is integrated linearly implicitly and does not
    restrict the step.
    """
    u = state.u
    p, q = params.p, params.q
    hs = _hs(u, params.epsilon)
    coefs, _ = face_coefficients(u.values, hs, p, params.s_bar)
    jac = max(1.0, p - 1.0)
    cmax = max(float(c.max()) for c in coefs)
    diff = min(hs) ** 2 / (2 * u.grid.n * jac * cmax) if cmax > 0 else math.inf
    lam = state.report.lam
    umax = float(u.values.max())
    react = (q - 1.0) * lam * umax ** (q - 2.0)
    if p >= 2:
        react += (p - 1.0) * umax ** (p - 2.0)
    dt = diff if react <= 0 else min(diff, 1.0 / react)
    if not math.isfinite(dt):
        dt = params.dt_max
    return params.dt_safety * dt


def _semi_implicit_dt(state: FlowState, params: FlowParams) -> float:
    lam = state.report.lam
    umax = float(state.u.values.max())
    react = (params.q - 1.0) * lam * umax ** (params.q - 2.0)
    dt = params.dt_max
    if react > 0:
        dt = min(dt, params.dt_safety / react)
    return dt


def _absorption_rate(v, p):
    a = np.zeros_like(v)
    np.power(v, p - 2.0, out=a, where=v > 0)
    return a


def _explicit_update(v, hs, params, lam, dt):
    p, q = params.p, params.q
    lap = p_laplacian_values(v, hs, p, params.s_bar)
    source = lap + lam * v ** (q - 1.0)
    # (u_new - u)/dt = source - u^{p-2} u_new, i.e. absorption linearly implicit
    return (v + dt * source) / (1.0 + dt * _absorption_rate(v, p))


def _semi_implicit_update(v, hs, params, lam, dt):
    p, q = params.p, params.q
    coefs, _ = face_coefficients(v, hs, p, params.s_bar)
    L = diffusion_matrix(coefs, hs, v.shape)
    diag = 1.0 + dt * _absorption_rate(v, p).ravel()
    M = (sp.diags(diag) - dt * L).tocsr()
    rhs = (v + dt * lam * v ** (q - 1.0)).ravel()
    dinv = 1.0 / M.diagonal()
    pre = spla.LinearOperator(M.shape, matvec=lambda x: dinv * x)
    x, info = spla.cg(M, rhs, x0=v.ravel(), rtol=1e-12, atol=0.0, M=pre, maxiter=5000)
    if info != 0:
        raise NumericalOverflow(f"implicit solve did not converge (info={info})")
    return x.reshape(v.shape)


def step(state: FlowState, params: FlowParams, dt: float) -> FlowState:
    """Advance one step of size ``dt``; returns the new state.

    lambda is evaluated on the pre-step field.  Negative values are clipped to
    zero and the clipped mass recorded.  An increase of I_{s,eta} beyond
    10 * descent_tol raises :class:`DescentViolation` with the offending state.
    """
    if state.frozen:
        return state
    u = state.u
    v = u.values
    hs = _hs(u, params.epsilon)
    lam = state.report.lam
    if params.scheme == "explicit":
        new = _explicit_update(v, hs, params, lam, dt)
    else:
        new = _semi_implicit_update(v, hs, params, lam, dt)
    if not np.all(np.isfinite(new)):
        raise NumericalOverflow(f"non-finite values after step at t={state.t:.6g}")
    neg = new < 0
    clipped = 0.0
    if neg.any():
        clipped = float(-new[neg].sum()) * u.grid.cell_volume(params.epsilon)
        new = np.where(neg, 0.0, new)
    u_new = u.with_values(new)
    rep = _report(u_new, params)
    old = state.history[-1]
    _, eta_d = _eta_derivative(old.A, params)
    ut = (new - v) / dt
    vol = u.grid.cell_volume(params.epsilon)
    dissip = params.p * eta_d / old.B ** (params.p / params.q) * vol * float(np.sum(ut * ut))
    row = HistoryRow(state.t + dt, *rep, dt=dt, dissipation=dissip, clipped=clipped)
    nxt = replace(state, u=u_new, t=state.t + dt)
    if rep.I_s_eta - old.I_s_eta > 10 * params.descent_tol:
        nxt.history = state.history + [row]
        raise DescentViolation(
            f"I_s_eta increased by {rep.I_s_eta - old.I_s_eta:.3e} at t={state.t:.6g} (dt={dt:.3e})",
            state=nxt)
    state.history.append(row)
    rate = float(np.max(np.abs(ut)))
    if rate < params.conv_tol * float(np.max(np.abs(new))):
        nxt.quiet_steps = state.quiet_steps + 1
    else:
        nxt.quiet_steps = 0
    nxt.converged = nxt.quiet_steps >= params.conv_steps
    return nxt


def _eta_derivative(A, params):
    if params.eta_params is None:
        return A, 1.0
    from .functionals import eta

    return eta(A, params.eta_params)


def _freeze(state: FlowState) -> FlowState:
    state.frozen = True
    state.freeze_time = state.t
    last = state.history[-1]
    state.history[-1] = last._replace(frozen=True)
    return state


# -- traverse monitor ---------------------------------------------------------------------

class BandEvent(NamedTuple):
    t: float
    band: str
    key: tuple
    depth: float
    frozen: bool
    above_threshold: bool


class TraverseMonitor:
    """Watches the near-boundary bands of the peak class along a trajectory.

    Every monitored quantity is mapped to a depth x: x <= 0 before the inner
    edge of its band, 0 < x < 1 inside, x >= 1 at or past the outer edge.  A
    traverse is a passage from x <= 0 to x >= 1 without returning to x <= 0;
    one that happens while the run is unfrozen and above the freezing
    threshold is recorded in ``violations``.
    """

    def __init__(self, tolerances: PeakTolerances, epsilon: float, delta_bar: float):
        self.tol = tolerances
        self.eps = epsilon
        self.delta_bar = delta_bar
        self.armed: dict = {}
        self.last: dict = {}
        self.traverses: list = []
        self.violations: list = []

    def depths(self, verdict: PeakVerdict) -> dict:
        N, eps = self.tol.N, self.eps
        out = {}
        if math.isfinite(verdict.linf_gap):
            out[("a",)] = (verdict.linf_gap - 0.5 * self.delta_bar) / (0.5 * self.delta_bar)
        dist = verdict.distances
        if dist is not None:
            for i, d in enumerate(dist.to_boundary):
                out[("b", i)] = (2 * N * eps - d) / (N * eps)
            for i, d in enumerate(dist.interior_pairs):
                out[("c", i)] = (2 * N * eps - d) / (N * eps)
            for i, d in enumerate(dist.boundary_pairs):
                out[("d", i)] = (2 * N * eps - d) / (N * eps)
        c = verdict.normalized_coefficients
        if len(c) > 1:
            dh = self.tol.delta_hat
            for i, v in enumerate(c):
                out[("e", i)] = (abs(v - 1.0) - 0.5 * dh) / (0.5 * dh)
        return out

    def update(self, t: float, verdict: PeakVerdict, frozen: bool, above: bool) -> list:
        events = []
        for key, x in self.depths(verdict).items():
            prev = self.last.get(key)
            if prev is None:
                self.armed[key] = x <= 0
            elif x <= 0:
                self.armed[key] = True
            elif prev <= 0:
                self.armed[key] = True
            if x >= 1 and self.armed.get(key, False):
                ev = BandEvent(t, key[0], key, x, frozen, above)
                self.traverses.append(ev)
                if not frozen and above:
                    self.violations.append(ev)
                events.append(ev)
                self.armed[key] = False
            self.last[key] = x
        return events


# -- driver -------------------------------------------------------------------------------

@dataclass
class RunOptions:
    """Bookkeeping options of :func:`run`."""

    profile: object = None
    seeds: Optional[PeakConfig] = None
    tolerances: PeakTolerances = PeakTolerances()
    membership_every: float = 0.25
    on_tracking_lost: str = "raise"
    snapshot_every: Optional[float] = None
    callbacks: tuple = ()
    stop_when: Optional[Callable] = None
    max_steps: Optional[int] = None


def _check_membership(state: FlowState, params: FlowParams, opts: RunOptions, monitor):
    verdict, cfg, norm = membership(state.u, opts.profile, state.seeds, opts.tolerances)
    state.verdicts.append((state.t, verdict))
    above = params.threshold is None or state.report.I_s_eta > params.threshold
    if verdict.diagnostic.startswith(LOST_TAGS):
        if opts.on_tracking_lost == "raise" and not state.frozen and above:
            raise PeakTrackingLost(f"lost the peaks at t={state.t:.6g}: {verdict.diagnostic}",
                                   state=state)
        return verdict
    state.config_track.append((state.t, norm))
    state.seeds = cfg
    if monitor is not None:
        state.monitor.extend(monitor.update(state.t, verdict, state.frozen, above))
    return verdict


def run(initial: Field, params: FlowParams, t_end: float, options: RunOptions | None = None,
        state: FlowState | None = None) -> FlowState:
    """Integrate until ``t_end``, convergence or freezing.

    With ``options.seeds`` and ``options.profile`` set, the peak configuration
    is re-extracted every ``membership_every`` time units and the traverse
    monitor is updated; losing the peaks while unfrozen and above threshold
    raises :class:`PeakTrackingLost` unless ``on_tracking_lost="stop"``.
    """
    opts = options or RunOptions()
    if state is None:
        state = initial_state(initial, params)
    if opts.seeds is not None and state.seeds is None:
        state.seeds = opts.seeds
    tracking = state.seeds is not None and opts.profile is not None
    monitor = None
    if tracking:
        monitor = TraverseMonitor(opts.tolerances, params.epsilon,
                                  opts.tolerances.delta_bar(opts.profile))
        state.monitor_obj = monitor
        _check_membership(state, params, opts, monitor)
    next_member = state.t + opts.membership_every
    next_snap = state.t + opts.snapshot_every if opts.snapshot_every else math.inf
    steps = 0
    if opts.snapshot_every:
        for cb in opts.callbacks:
            cb(state)
    lost = False
    t_stop = t_end - 1e-14 * max(1.0, t_end) if math.isfinite(t_end) else math.inf
    while not state.frozen and not state.converged and state.t < t_stop:
        if params.scheme == "explicit":
            dt = stable_dt(state, params)
        else:
            dt = _semi_implicit_dt(state, params)
        dt = min(dt, t_end - state.t)
        state = _guarded_step(state, params, dt)
        steps += 1
        if params.threshold is not None and state.report.I_s_eta <= params.threshold:
            _freeze(state)
        if tracking and (state.t >= next_member - 1e-12 or state.frozen or state.t >= t_end - 1e-12):
            v = _check_membership(state, params, opts, monitor)
            next_member = state.t + opts.membership_every
            if v.diagnostic.startswith(LOST_TAGS):
                lost = True
        if state.t >= next_snap - 1e-12:
            for cb in opts.callbacks:
                cb(state)
            next_snap = state.t + opts.snapshot_every
        if lost or (opts.stop_when is not None and opts.stop_when(state)):
            break
        if opts.max_steps is not None and steps >= opts.max_steps:
            break
    state.tracking_lost = lost
    return state


def _guarded_step(state: FlowState, params: FlowParams, dt: float) -> FlowState:
    """Explicit steps are taken as given; implicit steps are halved on ascent."""
    if params.scheme == "explicit":
        return step(state, params, dt)
    for _ in range(12):
        try:
            return step(state, params, dt)
        except DescentViolation:
            dt *= 0.5
        except NumericalOverflow:
            dt *= 0.5
    return step(state, params, dt)


# -- stationary-point diagnostics ------------------------------------------------------------

def equation_residual(u: Field, p: float, q: float, s_bar: float, lam: float) -> float:
    """‖Δ_{p,s} u - u^{p-1} + lam u^{q-1}‖_2 / ‖lam u^{q-1}‖_2 in stretched coordinates."""
    v = u.values
    hs = _hs(u, u.epsilon)
    r = p_laplacian_values(v, hs, p, s_bar) - v ** (p - 1.0) + lam * v ** (q - 1.0)
    den = float(np.linalg.norm(lam * v ** (q - 1.0)))
    if den == 0:
        return math.inf
    return float(np.linalg.norm(r)) / den


def residual(state: FlowState, params: FlowParams):
    """(normalized residual of the stationary equation, lambda) for ``state.u``."""
    lam = _report(state.u, params).lam
    return equation_residual(state.u, params.p, params.q, params.s_bar, lam), lam


def remove_multiplier(u: Field, lam: float, p: float, q: float) -> Field:
    """lam^{1/(q-p)} u: turns a solution with coefficient lam into one with coefficient 1."""
    if not lam > 0:
        raise InvalidParameters(f"lambda must be positive, got {lam}")
    return u * lam ** (1.0 / (q - p))


class DescentAudit(NamedTuple):
    worst_increase: float
    ratio_min: float
    ratio_max: float
    steps: int
    ratios: np.ndarray


def descent_audit(state: FlowState, skip_near_freeze: int = 1) -> DescentAudit:
    """Largest per-step increase of I_{s,eta}, and -ΔI/dt against the dissipation.

    Steps adjacent to a freezing event are excluded from the ratio.
    """
    hist = state.history
    if len(hist) < 2:
        raise InvalidParameters("need at least two history rows")
    I = np.array([r.I_s_eta for r in hist])
    dt = np.array([r.dt for r in hist[1:]])
    dis = np.array([r.dissipation for r in hist[1:]])
    frz = np.array([r.frozen for r in hist[1:]])
    dI = np.diff(I)
    worst = float(dI.max())
    ok = (dt > 0) & (dis > 0)
    idx = np.flatnonzero(frz)
    for i in idx:
        ok[max(0, i - skip_near_freeze): i + skip_near_freeze + 1] = False
    ratios = (-dI[ok] / dt[ok]) / dis[ok]
    if ratios.size == 0:
        return DescentAudit(worst, math.nan, math.nan, int(dI.size), ratios)
    return DescentAudit(worst, float(ratios.min()), float(ratios.max()), int(dI.size), ratios)


# -- run directories ------------------------------------------------------------------------

def write_history_csv(state: FlowState, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "A", "B", "I_s", "I_s_eta", "lambda"])
        for r in state.history:
            wr.writerow([repr(float(v)) for v in (r.t, r.A, r.B, r.I_s, r.I_s_eta, r.lam)])


def write_config_track(state: FlowState, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        if not state.config_track:
            wr.writerow(["t"])
            return
        cfg0 = state.config_track[0][1]
        head = ["t"]
        for i in range(cfg0.k):
            head += [f"p{i + 1}_x{d + 1}" for d in range(cfg0.n)] + [f"a{i + 1}"]
        for j in range(cfg0.l):
            head += [f"q{j + 1}_edge", f"q{j + 1}_s", f"b{j + 1}"]
        head.append("bands")
        wr.writerow(head)
        bands = {t: "".join(v.bands) for t, v in state.verdicts}
        for t, cfg in state.config_track:
            row = [repr(float(t))]
            for p, a in zip(cfg.interior, cfg.a):
                row += [repr(float(x)) for x in p] + [repr(float(a))]
            for q, b in zip(cfg.boundary, cfg.b):
                row += [str(q.edge), repr(float(q.s)), repr(float(b))]
            row.append(bands.get(t, ""))
            wr.writerow(row)


def snapshot_writer(run_dir) -> Callable:
    """Callback writing ``snap_<t>.pkfld`` files into ``run_dir``."""
    os.makedirs(run_dir, exist_ok=True)

    def _write(state: FlowState):
        write_pkfld(state.u, os.path.join(run_dir, f"snap_{state.t:.6f}.pkfld"), state.t)

    return _write


def write_run_dir(state: FlowState, params: FlowParams, run_dir, meta: dict | None = None) -> None:
    """Persist history, configuration track, final field and parameters."""
    os.makedirs(run_dir, exist_ok=True)
    write_history_csv(state, os.path.join(run_dir, "run.csv"))
    write_config_track(state, os.path.join(run_dir, "config_track.csv"))
    write_pkfld(state.u, os.path.join(run_dir, "final.pkfld"), state.t)
    lines = []
    for k, v in sorted(params.__dict__.items()):
        if k == "eta_params":
            v = None if v is None else v.alpha
            k = "eta_alpha"
        lines.append(f"{k} = {v!r}")
    lines.append(f"s = {params.s!r}")
    lines.append(f"t_final = {state.t!r}")
    lines.append(f"frozen = {state.frozen}")
    lines.append(f"freeze_time = {state.freeze_time!r}")
    lines.append(f"converged = {state.converged}")
    for k, v in (meta or {}).items():
        lines.append(f"{k} = {v!r}" if not isinstance(v, str) else f"{k} = {v}")
    with open(os.path.join(run_dir, "meta.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
