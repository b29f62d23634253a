"""Radial ground state of  -Δ_p w = w^{q-1} - w^{p-1}  on R^n.

The profile is computed by shooting on w(0) = beta.  In the flux variable
phi = |w'|^{p-2} w' the radial equation becomes the first-order system

    w'   = |phi|^{1/(p-1)} sign(phi)
    phi' = -(n-1) phi / r + w^{p-1} - w^{q-1}

which is regular for every p > 1 away from r = 0.  Too small a beta makes the
solution turn back up before reaching zero, too large a beta makes it cross
zero; the ground state is the separatrix and is located by bisection.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import gamma as gamma_fn

from .errors import (
    IntegrationDiverged,
    InvalidParameters,
    NoGroundStateBracket,
    TailUnresolved,
)

log = logging.getLogger(__name__)

CROSSED_ZERO = "crossed_zero"
TURNED_UP = "turned_up"
DECAYED = "decayed"
_CLASSES = {1: CROSSED_ZERO, 2: TURNED_UP, 3: DECAYED}

#: number of series-start steps near the origin
SERIES_STEPS = 10
#: a shot counts as decayed once w drops below this fraction of beta
DECAY_FLOOR = 1e-8
#: lo/hi shots are trusted until they separate by this relative amount
SEPARATION_TOL = 1e-4


@dataclass(frozen=True)
class ProblemParams:
    """Exponents and dimension of the ground-state problem."""

    n: int
    p: float
    q: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise InvalidParameters(f"dimension n must be a positive integer, got {self.n}")
        if not self.p > 1.0:
            raise InvalidParameters(f"need p > 1, got p={self.p}")
        if not self.q > self.p:
            raise InvalidParameters(f"need q > p, got p={self.p}, q={self.q}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "q", float(self.q))

    @property
    def standing_assumptions_hold(self) -> bool:
        """True when 1 < p < n and q is below the critical exponent np/(n-p)."""
        n, p, q = self.n, self.p, self.q
        return p < n and q < n * p / (n - p)

    @property
    def warning(self) -> bool:
        # the solver runs for any q > p; this is informational only
        return not self.standing_assumptions_hold

    @property
    def target_decay_rate(self) -> float:
        return (1.0 / (self.p - 1.0)) ** (1.0 / self.p)

    @property
    def power_correction(self) -> float:
        """Exponent gamma of the algebraic factor r^{-gamma} in the tail."""
        return (self.n - 1.0) / (self.p * (self.p - 1.0))


class ShotRecord(NamedTuple):
    r: np.ndarray
    w: np.ndarray
    w_prime: np.ndarray
    classification: str


class DecayFit(NamedTuple):
    rate: float
    target: float
    prefactor: float
    r_start: float
    r_end: float
    samples: int


class SobolevConstant(NamedTuple):
    S0: float
    quotient: float


@numba.njit(cache=True)
def _rhs(r, w, phi, n, p, q):
    wp = math.copysign(abs(phi) ** (1.0 / (p - 1.0)), phi)
    aw = abs(w)
    src = math.copysign(aw ** (p - 1.0), w) - math.copysign(aw ** (q - 1.0), w)
    return wp, -(n - 1.0) * phi / r + src


@numba.njit(cache=True)
def _shoot(beta, n, p, q, r_max, h, floor, k0):
    m = int(r_max / h + 0.5) + 1
    rs = np.empty(m)
    ws = np.empty(m)
    ps = np.empty(m)
    f = beta ** (p - 1.0) - beta ** (q - 1.0)
    rs[0] = 0.0
    ws[0] = beta
    ps[0] = 0.0
    # two-term series with sig = p/(p-1), a = |f|/n, c = a^{1/(p-1)} / sig:
    #   phi = f r / n + g'(beta) s c r^{sig+1} / (sig + n)
    #   w   = beta + s c r^sig + s g'(beta) c a^{1/(p-1)-1} r^{2 sig} / (2 sig (p-1)(sig+n))
    sig = p / (p - 1.0)
    a = abs(f) / n
    s = 1.0 if f >= 0.0 else -1.0
    c = a ** (1.0 / (p - 1.0)) / sig
    g1 = (p - 1.0) * beta ** (p - 2.0) - (q - 1.0) * beta ** (q - 2.0)
    c2 = 0.0
    if a > 0.0:
        c2 = g1 * c * a ** (1.0 / (p - 1.0) - 1.0) / (2.0 * sig * (p - 1.0) * (sig + n))
    for i in range(1, k0 + 1):
        r = i * h
        rs[i] = r
        ps[i] = f * r / n + g1 * s * c * r ** (sig + 1.0) / (sig + n)
        ws[i] = beta + s * (c * r ** sig + c2 * r ** (2.0 * sig))
    if f >= 0.0:
        return rs[: k0 + 1], ws[: k0 + 1], ps[: k0 + 1], 2
    status = 0
    i = k0
    while i < m - 1:
        r = rs[i]
        w = ws[i]
        phi = ps[i]
        k1w, k1p = _rhs(r, w, phi, n, p, q)
        k2w, k2p = _rhs(r + 0.5 * h, w + 0.5 * h * k1w, phi + 0.5 * h * k1p, n, p, q)
        k3w, k3p = _rhs(r + 0.5 * h, w + 0.5 * h * k2w, phi + 0.5 * h * k2p, n, p, q)
        k4w, k4p = _rhs(r + h, w + h * k3w, phi + h * k3p, n, p, q)
        i += 1
        rs[i] = r + h
        ws[i] = w + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
        ps[i] = phi + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        if not (math.isfinite(ws[i]) and math.isfinite(ps[i])):
            status = -1
            break
        if ws[i] <= 0.0:
            status = 1
            break
        if ps[i] >= 0.0:
            status = 2
            break
        if ws[i] < floor * beta:
            status = 3
            break
    if status == 0:
        # reached r_max still positive and decreasing
        status = 3
    return rs[: i + 1], ws[: i + 1], ps[: i + 1], status


def _flux_to_slope(phi, p):
    return np.sign(phi) * np.abs(phi) ** (1.0 / (p - 1.0))


def integrate_radial(params: ProblemParams, beta: float, r_max: float = 30.0,
                     h: float = 1e-3, floor: float = DECAY_FLOOR) -> ShotRecord:
    """Shoot from w(0) = beta, w'(0) = 0 with a fixed-step RK4 scheme.

    Returns the samples up to the classifying event: ``crossed_zero`` when w
    reaches 0 while decreasing, ``turned_up`` when w' returns to 0 with
    w > 0, ``decayed`` when w falls below 1e-8 beta (or reaches ``r_max``)
    while still decreasing.  ``floor=0`` disables the early decayed exit.
    """
    if not beta > 0:
        raise InvalidParameters(f"beta must be positive, got {beta}")
    if not (h > 0 and h <= r_max / 100.0):
        raise InvalidParameters(f"step h={h} must lie in (0, r_max/100]")
    n, p, q = params.n, params.p, params.q
    try:
        f = beta ** (p - 1.0) - beta ** (q - 1.0)
    except OverflowError:
        f = math.inf
    if not math.isfinite(f) or not math.isfinite(abs(f) ** (1.0 / (p - 1.0))):
        raise InvalidParameters(f"beta={beta} too large: flux exponent overflows")
    r, w, phi, status = _shoot(float(beta), float(n), p, q, float(r_max), float(h),
                               float(floor), SERIES_STEPS)
    if status < 0:
        raise IntegrationDiverged(f"non-finite state at r={r[-1]:.4g} for beta={beta}")
    return ShotRecord(r.copy(), w.copy(), _flux_to_slope(phi, p), _CLASSES[status])


@dataclass(frozen=True)
class RadialProfile:
    """Sampled ground state with its norms and tail model.

    ``r_grid`` runs from 0 to ``r_max`` with the shooting step.  Samples with
    ``r <= r_resolved`` come from the integrator; beyond that the tail
    ``C r^{-gamma} exp(-rate r)`` fitted on the resolved part is used.
    """

    params: ProblemParams
    r_grid: np.ndarray
    w_values: np.ndarray
    w_prime: np.ndarray
    beta: float
    decay_rate: float
    E_p: float
    M_q: float
    r_resolved: float
    tail_prefactor: float
    _interp: PchipInterpolator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("r_grid", "w_values", "w_prime"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_interp", PchipInterpolator(self.r_grid, self.w_values))

    @property
    def r_max(self) -> float:
        return float(self.r_grid[-1])

    @property
    def S0(self) -> float:
        return self.E_p ** (1.0 - self.params.p / self.params.q)

    @property
    def nehari_residual(self) -> float:
        return abs(self.E_p - self.M_q) / self.M_q

    def tail(self, r):
        r = np.asarray(r, dtype=float)
        g = self.params.power_correction
        with np.errstate(divide="ignore"):
            return self.tail_prefactor * np.power(r, -g) * np.exp(-self.decay_rate * r)

    def __call__(self, r):
        """Evaluate w at radii ``r`` (monotone cubic inside, tail model outside)."""
        r = np.abs(np.asarray(r, dtype=float))
        out = np.empty_like(r)
        inside = r <= self.r_max
        out[inside] = self._interp(r[inside])
        if not inside.all():
            # continuous hand-off at r_max
            scale = self.w_values[-1] / self.tail(self.r_max)
            out[~inside] = scale * self.tail(r[~inside])
        return out


def _surface_measure(n: int) -> float:
    return 2.0 * math.pi ** (n / 2.0) / gamma_fn(n / 2.0)


def _fit_tail(r, w, params, beta, r_hi):
    """Least-squares rate on the window w < 1e-2 beta, r <= r_hi."""
    g = params.power_correction
    sel = (w < 1e-2 * beta) & (r <= r_hi) & (r > 0) & (w > 0)
    m = int(sel.sum())
    if m < 50:
        raise TailUnresolved(
            f"tail window has {m} samples (need >= 50); increase r_max or refine h")
    rr = r[sel]
    y = -np.log(w[sel]) - g * np.log(rr)
    slope, icpt = np.polyfit(rr, y, 1)
    return DecayFit(float(slope), params.target_decay_rate, float(np.exp(-icpt)),
                    float(rr[0]), float(rr[-1]), m)


def decay_rate(profile: RadialProfile) -> DecayFit:
    """Fit the exponential rate of the resolved tail of ``profile``."""
    return _fit_tail(profile.r_grid, profile.w_values, profile.params, profile.beta,
                     profile.r_resolved)


def _radial_norms(r, w, wp, params, r_resolved, rate):
    n, p, q = params.n, params.p, params.q
    om = _surface_measure(n)
    rn = r ** (n - 1)
    fe = (np.abs(wp) ** p + w ** p) * rn
    fm = w ** q * rn
    E = np.trapezoid(fe, r)
    M = np.trapezoid(fm, r)
    # analytic remainder past the grid end: the integrands decay like
    # exp(-p rate r) and exp(-q rate r) to leading order
    E_rest = fe[-1] / (p * rate)
    M_rest = fm[-1] / (q * rate)
    ext = r >= r_resolved
    E_tail = np.trapezoid(fe[ext], r[ext]) + E_rest if ext.sum() > 1 else E_rest
    M_tail = np.trapezoid(fm[ext], r[ext]) + M_rest if ext.sum() > 1 else M_rest
    E_tot = om * (E + E_rest)
    M_tot = om * (M + M_rest)
    frac = max(om * E_tail / E_tot, om * M_tail / M_tot)
    return E_tot, M_tot, frac


def norms(profile: RadialProfile) -> tuple[float, float]:
    """Return (E_p, M_q) computed by radial quadrature with tail correction."""
    E, M, frac = _radial_norms(profile.r_grid, profile.w_values, profile.w_prime,
                               profile.params, profile.r_resolved, profile.decay_rate)
    if frac > 0.01:
        raise TailUnresolved(f"tail correction is {100 * frac:.2f}% of the integral")
    return E, M


def sobolev_constant(profile: RadialProfile) -> SobolevConstant:
    """S0 = E_p^{1-p/q}, together with the quotient E_p / M_q^{p/q}."""
    p, q = profile.params.p, profile.params.q
    return SobolevConstant(profile.E_p ** (1.0 - p / q), profile.E_p / profile.M_q ** (p / q))


def quotient(profile: RadialProfile, scale: float = 1.0) -> float:
    """Radial quotient  ∫(|Dv|^p + v^p) / (∫ v^q)^{p/q}  for v = scale * w."""
    p, q = profile.params.p, profile.params.q
    E, M, _ = _radial_norms(profile.r_grid, scale * profile.w_values,
                            scale * profile.w_prime, profile.params, profile.r_resolved,
                            profile.decay_rate)
    return E / M ** (p / q)


def _bracket(params, r_max, h):
    """Doubling/halving search from beta = 1 for (turned_up, crossed_zero)."""
    lo = hi = None
    beta = 1.0
    while beta <= 1e3:
        cls = integrate_radial(params, beta, r_max, h, 0.0).classification
        if cls == CROSSED_ZERO:
            hi = beta
            break
        if cls == DECAYED:
            return beta, beta
        lo = beta
        beta *= 2.0
    if hi is None:
        raise NoGroundStateBracket("no crossed_zero shot found for beta <= 1e3")
    if lo is None:
        beta = hi
        while beta >= 1e-3:
            beta *= 0.5
            cls = integrate_radial(params, beta, r_max, h, 0.0).classification
            if cls == TURNED_UP:
                lo = beta
                break
            if cls == DECAYED:
                return beta, beta
            hi = beta
        if lo is None:
            raise NoGroundStateBracket("no turned_up shot found for beta >= 1e-3")
    return lo, hi


def find_ground_state(params: ProblemParams, tol: float = 1e-14, r_max: float = 30.0,
                      h: float = 1e-3) -> RadialProfile:
    """Locate the ground state by bisection on the shooting value.

    The two bracketing shots agree up to the radius where their (exponentially
    growing) separation becomes visible; that common part is kept and the tail
    beyond it is replaced by the fitted exponential.  The separation grows
    like ``(hi - lo) exp(2 rate r)``, so the default ``tol`` is close to machine
    precision; a looser tolerance simply shortens the resolved part.
    """
    if not (0 < tol <= 1e-3):
        raise InvalidParameters(f"tol must lie in (0, 1e-3], got {tol}")
    # shots here run without the early "decayed" exit: a slightly
    # overshooting solution also passes below 1e-8 beta on its way to zero,
    # so only the turned_up/crossed_zero dichotomy is reliable
    lo, hi = _bracket(params, r_max, h)
    shot = None
    if lo == hi:
        shot = integrate_radial(params, lo, r_max, h, 0.0)
    while shot is None and hi - lo >= tol * 0.5 * (lo + hi):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s = integrate_radial(params, mid, r_max, h, 0.0)
        if s.classification == DECAYED:
            shot = s
        elif s.classification == TURNED_UP:
            lo = mid
        else:
            hi = mid
    if shot is not None:
        beta = float(shot.w[0])
        r, w, wp = shot.r, shot.w, shot.w_prime
        cut = r.size
    else:
        s_lo = integrate_radial(params, lo, r_max, h, 0.0)
        s_hi = integrate_radial(params, hi, r_max, h, 0.0)
        m = min(s_lo.r.size, s_hi.r.size)
        w_lo, w_hi = s_lo.w[:m], s_hi.w[:m]
        apart = np.abs(w_hi - w_lo) > SEPARATION_TOL * w_lo
        # also stop before the undershooting shot starts to flatten out
        flat = s_lo.w_prime[:m] >= -1e-300
        flat[0] = False
        bad = np.flatnonzero(apart | flat)
        cut = int(bad[0]) if bad.size else m
        beta = 0.5 * (lo + hi)
        r = s_lo.r[:cut]
        w = 0.5 * (w_lo[:cut] + w_hi[:cut])
        wp = 0.5 * (s_lo.w_prime[:cut] + s_hi.w_prime[:cut])
    r_res = float(r[-1])
    fit = _fit_tail(r, w, params, beta, r_res)
    rate = fit.rate
    if not rate > 0:
        raise TailUnresolved(f"fitted decay rate {rate} is not positive")
    # extend with the tail model, matched to the last resolved value
    m_full = int(r_max / h + 0.5) + 1
    r_full = np.arange(m_full) * h
    w_full = np.empty(m_full)
    wp_full = np.empty(m_full)
    k = r.size
    w_full[:k] = w
    wp_full[:k] = wp
    g = params.power_correction
    prefactor = w[-1] * r_res ** g * math.exp(rate * r_res)
    if k < m_full:
        rr = r_full[k:]
        w_full[k:] = prefactor * rr ** (-g) * np.exp(-rate * rr)
        wp_full[k:] = -w_full[k:] * (rate + g / rr)
    E, M, frac = _radial_norms(r_full, w_full, wp_full, params, r_res, rate)
    if frac > 0.01:
        raise TailUnresolved(f"tail correction is {100 * frac:.2f}% of the integral")
    prof = RadialProfile(params, r_full, w_full, wp_full, float(beta), float(rate),
                         float(E), float(M), r_res, float(prefactor))
    log.info("ground state n=%d p=%g q=%g: beta=%.10g E_p=%.8g M_q=%.8g rate=%.5g (r_res=%.3g)",
             params.n, params.p, params.q, beta, E, M, rate, r_res)
    if prof.nehari_residual > 1e-3:
        log.warning("Nehari residual %.2e exceeds 1e-3", prof.nehari_residual)
    return prof


def sample_on_grid(profile: RadialProfile, center, epsilon: float, grid):
    """Field with values w(|x - center| / epsilon) at the cell centres of ``grid``."""
    from .discretization import Field

    if not epsilon > 0:
        raise InvalidParameters(f"epsilon must be positive, got {epsilon}")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if center.size != grid.n:
        raise InvalidParameters(f"center has {center.size} coordinates for an n={grid.n} grid")
    return Field(grid, profile(bump_radius(grid, center) / epsilon), epsilon)


def bump_radius(grid, center):
    """Distance from every cell centre of ``grid`` to ``center``."""
    axes = grid.centers()
    d2 = np.zeros(grid.cells)
    for i, x in enumerate(axes):
        shape = [1] * grid.n
        shape[i] = -1
        d2 = d2 + ((x - center[i]) ** 2).reshape(shape)
    return np.sqrt(d2)


def write_profile_csv(profile: RadialProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", "w", "w_prime"])
        for r, w, wp in zip(profile.r_grid, profile.w_values, profile.w_prime):
            wr.writerow([repr(float(r)), repr(float(w)), repr(float(wp))])


def read_profile_csv(path, params: ProblemParams) -> RadialProfile:
    """Reload an exported profile; the tail model is refitted from the samples."""
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    r, w, wp = data[:, 0], data[:, 1], data[:, 2]
    beta = float(w[0])
    fit = _fit_tail(r, w, params, beta, r[-1])
    E, M, _ = _radial_norms(r, w, wp, params, r[-1], fit.rate)
    return RadialProfile(params, r, w, wp, beta, fit.rate, E, M, float(r[-1]), fit.prefactor)


_CACHE: dict = {}


def cached_ground_state(params: ProblemParams, **kw) -> RadialProfile:
    """Memoized :func:`find_ground_state` keyed on (n, p, q) and options."""
    key = (params.n, params.p, params.q, tuple(sorted(kw.items())))
    if key not in _CACHE:
        _CACHE[key] = find_ground_state(params, **kw)
    return _CACHE[key]

