"""Peak configurations, local mass centres, coefficient fits and membership.

A configuration Λ places k interior bumps at points p_i and l boundary bumps
at points q_j on the edges of the rectangle, with amplitudes a_i and b_j:

    phi_Λ(x) = Σ a_i w((x - p_i)/eps) + Σ b_j w((x - q_j)/eps).

Boundary points are stored as (edge, s).  In 2D the edges of
[0, L1] x [0, L2] are numbered 0: x2 = 0, 1: x1 = L1, 2: x2 = L2, 3: x1 = 0,
and ``s`` is the tangential coordinate of the point (x1 on edges 0 and 2, x2
on edges 1 and 3).  In 1D edge 0 is x = 0, edge 1 is x = L and ``s`` is unused.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from .discretization import Field, Grid, holder_quotient
from .errors import (
    CentreNotConverged,
    CentreNotFound,
    CornerExcluded,
    IllConditionedFit,
    InvalidParameters,
    PeakflowError,
    ResolutionError,
)
from .functionals import energy_terms
from .ground_state import RadialProfile, bump_radius

log = logging.getLogger(__name__)

BANDS = ("a", "b", "c", "d", "e")


# -- geometry -------------------------------------------------------------------

class BoundaryPoint(NamedTuple):
    edge: int
    s: float = 0.0


def _edge_layout(lengths, edge):
    """(normal axis, normal coordinate, tangential axis or None) of an edge."""
    if len(lengths) == 1:
        if edge not in (0, 1):
            raise InvalidParameters(f"1D domain has edges 0 and 1, got {edge}")
        return 0, (0.0 if edge == 0 else lengths[0]), None
    L1, L2 = lengths
    table = {0: (1, 0.0, 0), 1: (0, L1, 1), 2: (1, L2, 0), 3: (0, 0.0, 1)}
    if edge not in table:
        raise InvalidParameters(f"2D rectangle has edges 0..3, got {edge}")
    return table[edge]


def edge_length(lengths, edge) -> float:
    _, _, tang = _edge_layout(lengths, edge)
    return 0.0 if tang is None else float(lengths[tang])


def boundary_to_point(lengths, bp: BoundaryPoint) -> np.ndarray:
    normal, value, tang = _edge_layout(lengths, bp.edge)
    x = np.zeros(len(lengths))
    x[normal] = value
    if tang is not None:
        x[tang] = bp.s
    return x


def distance_to_boundary(lengths, point) -> float:
    point = np.asarray(point, dtype=float)
    return float(min(min(x, L - x) for x, L in zip(point, lengths)))


# -- configurations ---------------------------------------------------------------

@dataclass(frozen=True)
class PeakConfig:
    """Interior points, boundary points, their coefficients and epsilon."""

    interior: tuple
    boundary: tuple
    a: tuple
    b: tuple
    epsilon: float
    lengths: tuple

    def __post_init__(self):
        lengths = tuple(float(v) for v in np.atleast_1d(self.lengths))
        interior = tuple(tuple(float(c) for c in np.atleast_1d(p)) for p in self.interior)
        boundary = tuple(BoundaryPoint(int(bp[0]), float(bp[1]) if len(bp) > 1 else 0.0)
                         for bp in self.boundary)
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if len(interior) + len(boundary) < 1:
            raise InvalidParameters("a configuration needs at least one peak")
        if len(a) != len(interior) or len(b) != len(boundary):
            raise InvalidParameters("one coefficient per peak is required")
        if any(v <= 0 for v in a + b):
            raise InvalidParameters("coefficients must be positive")
        if not self.epsilon > 0:
            raise InvalidParameters("epsilon must be positive")
        for p in interior:
            if len(p) != len(lengths) or not all(0 < x < L for x, L in zip(p, lengths)):
                raise InvalidParameters(f"interior point {p} is not inside the domain")
        for bp in boundary:
            _edge_layout(lengths, bp.edge)
            if len(lengths) == 2 and not (0.0 <= bp.s <= edge_length(lengths, bp.edge)):
                raise InvalidParameters(f"boundary point {bp} is off its edge")

    @property
    def k(self) -> int:
        return len(self.interior)

    @property
    def l(self) -> int:
        return len(self.boundary)

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array(self.a + self.b)

    def centres(self) -> np.ndarray:
        """All bump centres as a (k + l, n) array, interior first."""
        pts = [np.array(p) for p in self.interior]
        pts += [boundary_to_point(self.lengths, bp) for bp in self.boundary]
        return np.array(pts).reshape(-1, self.n)

    def with_coefficients(self, coefs) -> "PeakConfig":
        coefs = [float(c) for c in coefs]
        return replace(self, a=tuple(coefs[: self.k]), b=tuple(coefs[self.k:]))

    def normalized(self) -> "NormalizedConfig":
        coefs = self.coefficients
        abar = float(coefs.mean())
        c = coefs / abar
        return NormalizedConfig(self.interior, self.boundary, tuple(c[: self.k]),
                                tuple(c[self.k:]), self.epsilon, self.lengths, abar)

    def to_text(self) -> str:
        return config_to_text(self)


@dataclass(frozen=True)
class NormalizedConfig(PeakConfig):
    """Configuration whose coefficients have mean 1; ``abar`` is the divisor used."""

    abar: float = 1.0


def config_to_text(cfg: PeakConfig) -> str:
    """Flat ``key = value`` serialization."""
    lines = [f"epsilon = {cfg.epsilon!r}",
             "lengths = " + ",".join(repr(v) for v in cfg.lengths),
             f"k = {cfg.k}", f"l = {cfg.l}"]
    for i, (p, a) in enumerate(zip(cfg.interior, cfg.a), 1):
        lines.append(f"p{i} = " + ",".join(repr(v) for v in p))
        lines.append(f"a{i} = {a!r}")
    for j, (q, b) in enumerate(zip(cfg.boundary, cfg.b), 1):
        lines.append(f"q{j}.edge = {q.edge}")
        lines.append(f"q{j}.s = {q.s!r}")
        lines.append(f"b{j} = {b!r}")
    if isinstance(cfg, NormalizedConfig):
        lines.append(f"abar = {cfg.abar!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> PeakConfig:
    kv = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParameters(f"malformed config line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        kv[key] = val
    try:
        k, l = int(kv["k"]), int(kv["l"])
        eps = float(kv["epsilon"])
        lengths = tuple(float(v) for v in kv["lengths"].split(","))
        interior = [tuple(float(v) for v in kv[f"p{i}"].split(",")) for i in range(1, k + 1)]
        a = [float(kv[f"a{i}"]) for i in range(1, k + 1)]
        boundary = [BoundaryPoint(int(kv[f"q{j}.edge"]), float(kv[f"q{j}.s"])) for j in range(1, l + 1)]
        b = [float(kv[f"b{j}"]) for j in range(1, l + 1)]
    except KeyError as exc:
        raise InvalidParameters(f"peak config is missing key {exc}") from None
    if "abar" in kv:
        return NormalizedConfig(interior, boundary, a, b, eps, lengths, float(kv["abar"]))
    return PeakConfig(interior, boundary, a, b, eps, lengths)


def write_config(cfg: PeakConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))


def read_config(path) -> PeakConfig:
    with open(path) as fh:
        return config_from_text(fh.read())


# -- building peak functions ----------------------------------------------------------

def check_resolution(epsilon: float, grid: Grid) -> None:
    if epsilon < 5.0 * max(grid.h) * (1 - 1e-12):
        raise ResolutionError(f"epsilon={epsilon} is below 5h={5 * max(grid.h):.4g}: bump unresolved")


def bump_values(profile: RadialProfile, centre, epsilon: float, grid: Grid) -> np.ndarray:
    return profile(bump_radius(grid, np.asarray(centre, dtype=float)) / epsilon)


def basis(config: PeakConfig, profile: RadialProfile, grid: Grid) -> list:
    return [bump_values(profile, c, config.epsilon, grid) for c in config.centres()]


def build_phi(config: PeakConfig, profile: RadialProfile, grid: Grid) -> Field:
    """Sum of scaled ground-state bumps sampled at the cell centres."""
    check_resolution(config.epsilon, grid)
    if tuple(grid.lengths) != tuple(config.lengths):
        raise InvalidParameters("configuration and grid describe different domains")
    vals = np.zeros(grid.shape)
    for c, w in zip(config.coefficients, basis(config, profile, grid)):
        vals += c * w
    return Field(grid, vals, config.epsilon)


# -- local mass centres -----------------------------------------------------------------

class _HalfBall:
    """Gauss rule on the half ball {|y| < 1, y_axis > 0} (unit radius)."""

    def __init__(self, n: int, nr: int = 16, nt: int = 32):
        xr, wr = np.polynomial.legendre.leggauss(nr)
        r = 0.5 * (xr + 1.0)
        if n == 1:
            self.offsets = {0: r[:, None]}
            self.weights = 0.5 * wr
            return
        xt, wt = np.polynomial.legendre.leggauss(nt)
        th = 0.5 * np.pi * xt  # angle from the axis direction, in (-pi/2, pi/2)
        R, T = np.meshgrid(r, th, indexing="ij")
        self.weights = (0.5 * wr[:, None] * R * 0.5 * np.pi * wt[None, :]).ravel()
        along = (R * np.cos(T)).ravel()
        across = (R * np.sin(T)).ravel()
        self.offsets = {0: np.stack([along, across], axis=1),
                        1: np.stack([across, along], axis=1)}


_RULES: dict = {}


def _rule(n):
    if n not in _RULES:
        _RULES[n] = _HalfBall(n)
    return _RULES[n]


class _Sampler:
    """Piecewise-linear interpolant of a field with even reflection past the faces."""

    def __init__(self, u: Field):
        self.values = np.asarray(u.values, dtype=float)
        self.h = np.array(u.grid.h)

    def __call__(self, pts):
        coords = (pts / self.h - 0.5).T
        return ndimage.map_coordinates(self.values, coords, order=1, mode="reflect")


def mass_difference(sampler, z, axis: int, t: float, epsilon: float, rule) -> float:
    """E_t: mass of u on the half ball {x_axis > t} minus {x_axis < t}, ball
    of radius epsilon centred at z with z[axis] replaced by t."""
    c = np.array(z, dtype=float)
    c[axis] = t
    off = rule.offsets[axis] * epsilon
    mirror = off.copy()
    mirror[:, axis] *= -1.0
    right = sampler(c + off)
    left = sampler(c + mirror)
    return float(np.dot(rule.weights, right - left))


def _root_on_axis(sampler, z, axis, lo, hi, epsilon, rule, tol):
    f_lo = mass_difference(sampler, z, axis, lo, epsilon, rule)
    f_hi = mass_difference(sampler, z, axis, hi, epsilon, rule)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise CentreNotFound(
            f"no sign change of the half-ball mass difference on axis {axis} in [{lo:.6g}, {hi:.6g}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = mass_difference(sampler, z, axis, mid, epsilon, rule)
        if f_mid == 0.0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _mass_centre(u: Field, seed, epsilon, axes, tol_frac=1e-6, move_tol=1e-3, max_sweeps=50):
    sampler = _Sampler(u)
    rule = _rule(u.grid.n)
    seed = np.asarray(seed, dtype=float)
    z = seed.copy()
    tol = tol_frac * epsilon
    for _ in range(max_sweeps):
        prev = z.copy()
        for ax in axes:
            z[ax] = _root_on_axis(sampler, z, ax, seed[ax] - 0.25 * epsilon,
                                  seed[ax] + 0.25 * epsilon, epsilon, rule, tol)
        if np.max(np.abs(z - prev)) < move_tol * epsilon:
            return z
    raise CentreNotConverged(f"mass centre near {seed} did not settle after {max_sweeps} sweeps")


def interior_mass_centre(u: Field, seed, epsilon: float, **kw) -> np.ndarray:
    """Point where the signed half-ball mass difference vanishes on every axis.

    Each axis is solved by bisection on [seed_i - eps/4, seed_i + eps/4]; the
    axes are cycled until a sweep moves the point by less than 1e-3 eps.
    """
    return _mass_centre(u, seed, epsilon, range(u.grid.n), **kw)


def boundary_mass_centre(u: Field, seed: BoundaryPoint, epsilon: float, **kw) -> BoundaryPoint:
    """Mass centre along the edge of ``seed``, using the even extension of u."""
    lengths = u.grid.lengths
    seed = BoundaryPoint(*seed)
    _, _, tang = _edge_layout(lengths, seed.edge)
    if tang is None:
        return seed
    L = lengths[tang]
    if seed.s < 0.25 * epsilon or seed.s > L - 0.25 * epsilon:
        raise CornerExcluded(f"boundary seed {seed} lies within eps/4 of a corner")
    z = _mass_centre(u, boundary_to_point(lengths, seed), epsilon, [tang], **kw)
    return BoundaryPoint(seed.edge, float(z[tang]))


def locate_centres(u: Field, seeds: PeakConfig) -> PeakConfig:
    """Recompute every centre of ``seeds`` from ``u`` (coefficients unchanged)."""
    eps = seeds.epsilon
    interior = [tuple(interior_mass_centre(u, p, eps)) for p in seeds.interior]
    boundary = [boundary_mass_centre(u, q, eps) for q in seeds.boundary]
    for p in interior:
        if not all(0 < x < L for x, L in zip(p, seeds.lengths)):
            raise CentreNotFound(f"interior centre {p} left the domain")
    return replace(seeds, interior=tuple(interior), boundary=tuple(boundary))


# -- coefficient fit --------------------------------------------------------------------

class FitResult(NamedTuple):
    config: PeakConfig
    residual: float
    gram: np.ndarray
    condition: float
    coeff_ok: bool

    @property
    def a(self):
        return self.config.a

    @property
    def b(self):
        return self.config.b


def fit_coefficients(u: Field, centres: PeakConfig, profile: RadialProfile,
                     delta_hat: float = 0.1, max_condition: float = 1e8) -> FitResult:
    """Least-squares amplitudes of the bumps at the given centres.

    Minimizes ∫(u - Σ c_i w_i)^2 over the cells (stretched coordinates); the
    minimizer is unconstrained and ``coeff_ok`` reports whether every
    coefficient lies in (1 - delta_hat, 1 + delta_hat).
    """
    grid = u.grid
    vol = grid.cell_volume(centres.epsilon)
    W = np.array([w.ravel() for w in basis(centres, profile, grid)])
    gram = vol * (W @ W.T)
    rhs = vol * (W @ u.values.ravel())
    cond = float(np.linalg.cond(gram))
    if not cond <= max_condition:
        raise IllConditionedFit(f"Gram matrix condition number {cond:.3e} exceeds {max_condition:.0e}")
    coefs = np.linalg.solve(gram, rhs)
    resid = u.values.ravel() - coefs @ W
    residual = float(np.sqrt(vol * np.dot(resid, resid)))
    ok = bool(np.all(np.abs(coefs - 1.0) < delta_hat))
    if np.any(coefs <= 0):
        raise IllConditionedFit(f"fit produced non-positive coefficients {coefs}")
    return FitResult(centres.with_coefficients(coefs), residual, gram, cond, ok)


# -- separation -------------------------------------------------------------------------

class Distances(NamedTuple):
    to_boundary: tuple      # d_{p_i}
    interior_pairs: tuple   # |p_i - p_j|, i < j
    boundary_pairs: tuple   # |q_i - q_j|, i < j


def distances(config: PeakConfig) -> Distances:
    pts = [np.array(p) for p in config.interior]
    qs = [boundary_to_point(config.lengths, q) for q in config.boundary]
    d = tuple(distance_to_boundary(config.lengths, p) for p in pts)
    ip = tuple(float(np.linalg.norm(pts[i] - pts[j]))
               for i, j in itertools.combinations(range(len(pts)), 2))
    bp = tuple(float(np.linalg.norm(qs[i] - qs[j]))
               for i, j in itertools.combinations(range(len(qs)), 2))
    return Distances(d, ip, bp)


class ApartResult(NamedTuple):
    ok: bool
    failing: Optional[tuple]

    def __bool__(self):
        return self.ok


def delta_apart(config: PeakConfig, delta: float) -> ApartResult:
    """d_{p_i} > delta, |p_i - p_j| > 2 delta and |q_i - q_j| > 2 delta."""
    for i, p in enumerate(config.interior):
        if not distance_to_boundary(config.lengths, p) > delta:
            return ApartResult(False, (("p", i), "boundary"))
    pts = [np.array(p) for p in config.interior]
    for i, j in itertools.combinations(range(len(pts)), 2):
        if not np.linalg.norm(pts[i] - pts[j]) > 2 * delta:
            return ApartResult(False, (("p", i), ("p", j)))
    qs = [boundary_to_point(config.lengths, q) for q in config.boundary]
    for i, j in itertools.combinations(range(len(qs)), 2):
        if not np.linalg.norm(qs[i] - qs[j]) > 2 * delta:
            return ApartResult(False, (("q", i), ("q", j)))
    return ApartResult(True, None)


# -- membership -------------------------------------------------------------------------

@dataclass(frozen=True)
class PeakTolerances:
    """Constants of the peak-function class.

    ``delta = N eps``; ``delta_bar = delta_bar_factor * beta``;
    ``energy_cap = energy_cap_factor * (k + l) * E_p``;
    ``holder_cap = holder_cap_factor * beta`` for the exponent ``holder_gamma``.
    """

    N: float = 2.0
    delta_bar_factor: float = 0.1
    delta_hat: float = 0.1
    energy_cap_factor: float = 3.0
    holder_gamma: float = 0.5
    holder_cap_factor: float = 3.0

    def delta(self, epsilon: float) -> float:
        return self.N * epsilon

    def delta_bar(self, profile: RadialProfile) -> float:
        return self.delta_bar_factor * profile.beta


def active_bands(gap, dist: Distances, coefs_normalized, tol: PeakTolerances,
                 epsilon, delta_bar) -> tuple:
    """Tags of the near-boundary bands of the class that contain the state."""
    lo, hi = tol.N * epsilon, 2 * tol.N * epsilon
    tags = []
    if 0.5 * delta_bar <= gap <= delta_bar:
        tags.append("a")
    if any(lo <= d <= hi for d in dist.to_boundary):
        tags.append("b")
    if any(lo <= d <= hi for d in dist.interior_pairs):
        tags.append("c")
    if any(lo <= d <= hi for d in dist.boundary_pairs):
        tags.append("d")
    if len(coefs_normalized) > 1:
        dev = np.abs(np.asarray(coefs_normalized) - 1.0)
        if np.any((dev >= 0.5 * tol.delta_hat) & (dev <= tol.delta_hat)):
            tags.append("e")
    return tuple(tags)


@dataclass(frozen=True)
class PeakVerdict:
    is_peak: bool
    linf_gap: float
    energy: float
    holder_quotient: float
    apart_ok: bool
    coeff_ok: bool
    failing_condition: Optional[str] = None
    bands: tuple = ()
    distances: Optional[Distances] = None
    normalized_coefficients: tuple = ()
    diagnostic: str = ""


def membership(u: Field, profile: RadialProfile, seeds: PeakConfig,
               tolerances: PeakTolerances = PeakTolerances()):
    """Decide whether ``u`` is a peak function near the configuration ``seeds``.

    Returns ``(verdict, config, normalized)``.  The verdict is positive only
    when every defining check passes *and* the state sits in none of the
    near-boundary bands a)-e); ``failing_condition`` names the first band
    occupied or the first check violated.  Sub-operation errors give a
    negative verdict with a diagnostic instead of raising.
    """
    eps = seeds.epsilon
    delta = tolerances.delta(eps)
    delta_bar = tolerances.delta_bar(profile)
    try:
        located = locate_centres(u, seeds)
        fit = fit_coefficients(u, located, profile, tolerances.delta_hat)
    except PeakflowError as exc:
        verdict = PeakVerdict(False, np.inf, np.nan, np.nan, False, False, "a",
                              diagnostic=f"{exc.tag}: {exc}")
        return verdict, seeds, seeds.normalized()
    config = fit.config
    norm = config.normalized()
    phi = build_phi(config, profile, u.grid)
    gap = float(np.max(np.abs(u.values - phi.values)))
    dist = distances(config)
    apart = delta_apart(config, delta)
    coefs_n = norm.coefficients
    coeff_ok = bool(np.all(np.abs(coefs_n - 1.0) < tolerances.delta_hat))
    A, _ = energy_terms(u, profile.params.p, profile.params.q, 0.0)
    cap = tolerances.energy_cap_factor * (config.k + config.l) * profile.E_p
    hq = holder_quotient(u, tolerances.holder_gamma, eps)
    hcap = tolerances.holder_cap_factor * profile.beta
    bands = active_bands(gap, dist, coefs_n, tolerances, eps, delta_bar)

    failing = None
    notes = []
    if not gap < delta_bar:
        failing = "a"
    elif not apart.ok:
        kinds = apart.failing
        failing = "b" if kinds[1] == "boundary" else ("c" if kinds[0][0] == "p" else "d")
    elif not coeff_ok:
        failing = "e"
    elif bands:
        failing = bands[0]
    if A > cap:
        notes.append(f"energy {A:.4g} exceeds cap {cap:.4g}")
    if hq > hcap:
        notes.append(f"Holder quotient {hq:.4g} exceeds cap {hcap:.4g}")
    is_peak = failing is None and not notes
    verdict = PeakVerdict(is_peak, gap, A, hq, apart.ok, coeff_ok, failing, bands, dist,
                          tuple(coefs_n), "; ".join(notes))
    return verdict, config, norm
