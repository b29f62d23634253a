"""Property suites run by ``peakflow verify``.

Each suite returns a :class:`SuiteResult`; a suite never raises for a failed
property, only for broken inputs.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from .discretization import Field, Grid
from .errors import DescentViolation, NumericalOverflow
from .flow import FlowParams, RunOptions, descent_audit, run
from .functionals import (
    EtaParams,
    H_hessian_fd,
    H_second_partial,
    H_second_partial_at_critical,
    critical_coordinate,
    eta,
    eta_seam_gaps,
    functional_on_subdomain,
)
from .ground_state import ProblemParams, cached_ground_state, decay_rate
from .peaks import PeakConfig, build_phi, interior_mass_centre, mass_difference, _HalfBall, _Sampler


class SuiteResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def suite_nehari(cases=((2, 1.5, 3.0), (3, 2.0, 4.0), (2, 1.5, 4.0)), tol=1e-3) -> SuiteResult:
    worst = 0.0
    parts = []
    for n, p, q in cases:
        prof = cached_ground_state(ProblemParams(n, p, q))
        rel = abs(prof.E_p - prof.M_q) / prof.M_q
        worst = max(worst, rel)
        parts.append(f"({n},{p:g},{q:g}) {rel:.2e}")
    return SuiteResult("nehari", worst <= tol, "; ".join(parts))


def suite_decay(tol=0.05) -> SuiteResult:
    parts = []
    ok = True
    for n, p, q in ((1, 2.0, 4.0), (2, 1.5, 3.0)):
        params = ProblemParams(n, p, q)
        fit = decay_rate(cached_ground_state(params))
        target = params.target_decay_rate
        rel = abs(fit.rate - target) / target
        ok &= rel <= tol
        parts.append(f"({n},{p:g},{q:g}) rate {fit.rate:.5f} vs {target:.5f}")
    return SuiteResult("decay", bool(ok), "; ".join(parts))


def suite_eta_seams(alpha=1.7, tol=1e-12) -> SuiteResult:
    ep = EtaParams(alpha)
    gaps = eta_seam_gaps(ep)
    worst = max(max(v) for v in gaps.values())
    ratio = eta(3 * alpha, ep)[0] / alpha
    ok = worst <= tol * max(1.0, alpha) and abs(ratio - 2 * math.exp(0.5)) <= 1e-5
    return SuiteResult("eta_seams", bool(ok), f"max seam jump {worst:.2e}, eta(3a)/a = {ratio:.6f}")


def _second_at_critical(a, b, p, q, index, mutate):
    v = H_second_partial_at_critical(a, b, p, q, index)
    if mutate:
        # deliberate fault used to check that the suite can fail
        v = -v
    return v


def suite_h_hessian(points=20, seed=0, tol=1e-6, mutate=False) -> SuiteResult:
    """Random coefficients with one coordinate moved to its critical value:
    finite differences, the quotient rule and the reduced closed form agree
    and are negative."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    negative = True
    for _ in range(points):
        k = int(rng.integers(0, 4))
        l = int(rng.integers(0 if k >= 2 else 2 - k, 3))
        p = float(rng.uniform(1.2, 3.0))
        q = float(rng.uniform(p + 0.3, p + 3.0))
        x = rng.uniform(0.8, 1.2, k + l)
        i = int(rng.integers(0, k + l))
        x[i] = critical_coordinate(x[:k], x[k:], p, q, i)
        a, b = x[:k], x[k:]
        fd = H_hessian_fd(a, b, p, q, step=1e-4)[i, i]
        closed = H_second_partial(a, b, p, q, i)
        formula = _second_at_critical(a, b, p, q, i, mutate)
        worst = max(worst, abs(fd - closed), abs(formula - closed))
        negative &= closed < 0 and formula < 0
    return SuiteResult("h_hessian", bool(worst <= tol and negative),
                       f"worst mismatch {worst:.2e}, all negative: {bool(negative)}")


def suite_descent(dt_safety=0.9, fields=3, cells=32, steps=300, seed=1) -> SuiteResult:
    """Explicit runs from random fields.  The p = 2 case has linear diffusion,
    for which the step bound is sharp, so an oversized ``dt_safety`` shows up
    as checkerboard growth."""
    rng = np.random.default_rng(seed)
    grid = Grid((1.0, 1.0), (cells, cells))
    worst = -math.inf
    for p, q in ((1.5, 3.0), (2.0, 4.0)):
        params = FlowParams(p, q, 0.05, dt_safety=dt_safety, scheme="explicit")
        for _ in range(fields):
            u = Field(grid, rng.uniform(0.0, 2.0, grid.shape), epsilon=0.05)
            try:
                state = run(u, params, math.inf, RunOptions(max_steps=steps))
            except (DescentViolation, NumericalOverflow) as exc:
                return SuiteResult("descent", False, f"p={p:g}: {exc.tag}: {exc}")
            worst = max(worst, descent_audit(state).worst_increase)
    return SuiteResult("descent", worst <= 1e-8, f"worst step increase {worst:.2e}")


def suite_subdomain_monotonicity(tol=1e-9) -> SuiteResult:
    eps = 0.05
    prof = cached_ground_state(ProblemParams(2, 1.5, 3.0))
    grid = Grid((1.0, 1.0), (100, 100))
    cfg = PeakConfig([(0.5, 0.5)], [], [1.0], [], eps, (1.0, 1.0))
    u = build_phi(cfg, prof, grid)
    X, Y = grid.mesh()
    r = np.hypot(X - 0.5, Y - 0.5)
    vals = u.values
    # first radius beyond which u stays below 1e-3
    r1 = float(r[vals >= 1e-3].max()) + grid.h[0]
    radii = np.linspace(r1, 0.45, 8)
    hs = [functional_on_subdomain(u, r <= t, 1.0, 1.0, 1.5, 3.0) for t in radii]
    drops = np.diff(hs)
    ok = bool(np.all(drops >= -tol))
    return SuiteResult("subdomain_monotonicity", ok, f"min increment {drops.min():.2e}")


def brute_force_centre(u: Field, seed, epsilon, span, resolution) -> np.ndarray:
    """Mass centre by scanning sign changes of E_t on a line grid per axis.

    Alternates axes until the point stops moving, like the bisection solver,
    but locates each root by an exhaustive scan at spacing ``resolution``.
    """
    sampler = _Sampler(u)
    rule = _HalfBall(u.grid.n)
    z = np.array(seed, dtype=float)
    for _ in range(20):
        old = z.copy()
        for axis in range(u.grid.n):
            ts = np.arange(z[axis] - span, z[axis] + span + resolution / 2, resolution)
            vals = np.array([mass_difference(sampler, z, axis, t, epsilon, rule) for t in ts])
            sign = np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
            if sign.size == 0:
                raise ValueError("no sign change in scan window")
            j = sign[np.argmin(np.abs(ts[sign] - z[axis]))]
            z[axis] = 0.5 * (ts[j] + ts[j + 1])
        if np.max(np.abs(z - old)) < resolution / 2:
            break
    return z


def suite_mass_centre(fields=10, seed=2) -> SuiteResult:
    rng = np.random.default_rng(seed)
    eps = 0.05
    prof = cached_ground_state(ProblemParams(2, 1.5, 3.0))
    grid = Grid((1.0, 1.0), (100, 100))
    h = grid.h[0]
    worst = 0.0
    for _ in range(fields):
        c = rng.uniform(0.35, 0.65, 2)
        cfg = PeakConfig([tuple(c)], [], [1.0], [], eps, (1.0, 1.0))
        u = build_phi(cfg, prof, grid)
        pert = 0.02 * prof.beta * rng.standard_normal(grid.shape)
        u = u.with_values(np.maximum(u.values + pert * (u.values > 0.1), 0.0))
        fast = interior_mass_centre(u, c, eps)
        slow = brute_force_centre(u, c, eps, eps / 4, h / 10)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    return SuiteResult("mass_centre", worst <= h, f"worst disagreement {worst / h:.3f} h")


SUITES: dict = {
    "nehari": suite_nehari,
    "decay": suite_decay,
    "eta_seams": suite_eta_seams,
    "h_hessian": suite_h_hessian,
    "descent": suite_descent,
    "subdomain_monotonicity": suite_subdomain_monotonicity,
    "mass_centre": suite_mass_centre,
}


def run_all(mutate_h: bool = False, dt_safety: float = 0.9,
            report: Callable[[SuiteResult], None] | None = None) -> list:
    results = []
    for name, fn in SUITES.items():
        if name == "h_hessian":
            res = fn(mutate=mutate_h)
        elif name == "descent":
            res = fn(dt_safety=dt_safety)
        else:
            res = fn()
        results.append(res)
        if report is not None:
            report(res)
    return results
