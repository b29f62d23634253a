"""Energy quotients, the cutoff eta and the coefficient function H.

All integrals are taken in the stretched variable y = x / epsilon, so that

    A = ∫ (s + |D_y u|^2)^{p/2} + u^p dy,     B = ∫ u^q dy,

    I_s = A / B^{p/q},   I_{s,eta} = eta(A) / B^{p/q},   lambda = eta(A) / (eta'(A) B).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .discretization import Field, energy_density_values
from .errors import DegenerateField, InvalidParameters

#: smallest admissible B before a field is considered degenerate
B_FLOOR = 1e-250


@dataclass(frozen=True)
class EtaParams:
    """Cutoff scale; the cutoff is the identity on [alpha/2, 2 alpha]."""

    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidParameters(f"alpha must be positive, got {self.alpha}")

    @classmethod
    def for_peaks(cls, k: int, l: int, E_p: float) -> "EtaParams":
        return cls((k + 0.5 * l) * E_p)


class FunctionalReport(NamedTuple):
    A: float
    B: float
    I_s: float
    I_s_eta: float
    lam: float


def eta(t, params: EtaParams):
    """C^1 cutoff: (alpha/2) e^{2t/alpha - 1} below alpha/2, t in between,
    2 alpha e^{t/(2 alpha) - 1} above 2 alpha.  Returns (value, derivative)."""
    a = params.alpha
    t = np.asarray(t, dtype=float)
    lo = t < 0.5 * a
    hi = t > 2.0 * a
    e_lo = np.exp(np.where(lo, 2.0 * t / a - 1.0, 0.0))
    e_hi = np.exp(np.where(hi, t / (2.0 * a) - 1.0, 0.0))
    val = np.where(lo, 0.5 * a * e_lo, np.where(hi, 2.0 * a * e_hi, t))
    der = np.where(lo, e_lo, np.where(hi, e_hi, 1.0))
    if val.ndim == 0:
        return float(val), float(der)
    return val, der


def energy_terms(u: Field, p: float, q: float, s_bar: float):
    """(A, B) for ``u`` in stretched coordinates."""
    eps = u.epsilon
    hs = [h / eps for h in u.grid.h]
    vol = u.grid.cell_volume(eps)
    v = u.values
    A = vol * float(np.sum(energy_density_values(v, hs, p, s_bar) + v ** p))
    B = vol * float(np.sum(v ** q))
    return A, B


def report_from_terms(A: float, B: float, p: float, q: float,
                      eta_params: EtaParams | None) -> FunctionalReport:
    if not B > B_FLOOR:
        raise DegenerateField(f"B = {B:.3e} is below the machine floor")
    denom = B ** (p / q)
    if eta_params is None:
        return FunctionalReport(A, B, A / denom, A / denom, A / B)
    ev, ed = eta(A, eta_params)
    return FunctionalReport(A, B, A / denom, ev / denom, ev / (ed * B))


def evaluate(u: Field, p: float, q: float, s_bar: float = 0.0,
             eta_params: EtaParams | None = None) -> FunctionalReport:
    """A, B, I_s, I_{s,eta} and lambda for a nonnegative field.

    ``s_bar`` is the regularizer in stretched coordinates (``epsilon^2 s``).
    Without ``eta_params`` the cutoff is the identity.
    """
    if np.any(u.values < 0):
        raise InvalidParameters("functional requires a nonnegative field")
    A, B = energy_terms(u, p, q, s_bar)
    return report_from_terms(A, B, p, q, eta_params)


def quotient(u: Field, p: float, q: float) -> float:
    """I(u) = ∫(|Du|^p + u^p) / (∫u^q)^{p/q}, homogeneous of degree 0."""
    return evaluate(u, p, q, 0.0).I_s


def functional_on_subdomain(u: Field, mask, alpha_off: float, beta_off: float,
                            p: float, q: float, s_bar: float = 0.0) -> float:
    """(alpha_off + ∫_mask[(s+|Du|^2)^{p/2} + u^p]) / (beta_off + ∫_mask u^q)^{p/q}.

    The gradient density is computed from the whole field so that restricting
    to a mask does not create artificial boundary jumps.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidParameters("mask selects no cells")
    if alpha_off < 0 or beta_off < 0:
        raise InvalidParameters("offsets must be nonnegative")
    eps = u.epsilon
    hs = [h / eps for h in u.grid.h]
    vol = u.grid.cell_volume(eps)
    v = u.values
    dens = energy_density_values(v, hs, p, s_bar) + v ** p
    num = alpha_off + vol * float(np.sum(dens[mask]))
    den = beta_off + vol * float(np.sum(v[mask] ** q))
    if not den > 0:
        raise DegenerateField("empty denominator on the subdomain")
    return num / den ** (p / q)


# -- the finite-dimensional function H ------------------------------------------

def _weights(k, l):
    return np.concatenate([np.ones(k), np.full(l, 0.5)])


def H(a: Sequence[float], b: Sequence[float], p: float, q: float) -> float:
    """(Σ a_i^p + ½ Σ b_j^p) / (Σ a_i^q + ½ Σ b_j^q)^{p/q}."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if np.any(a <= 0) or np.any(b <= 0):
        raise InvalidParameters("coefficients must be positive")
    N = np.sum(a ** p) + 0.5 * np.sum(b ** p)
    D = np.sum(a ** q) + 0.5 * np.sum(b ** q)
    return float(N / D ** (p / q))


def _split(x, k):
    x = np.asarray(x, dtype=float)
    return x[:k], x[k:]


def H_gradient(a, b, p, q) -> np.ndarray:
    """Closed-form gradient of H with respect to (a, b)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    x = np.concatenate([a, b])
    w = _weights(a.size, b.size)
    N = np.sum(w * x ** p)
    D = np.sum(w * x ** q)
    r = p / q
    return w * p * x ** (p - 1) / D ** r - r * N * w * q * x ** (q - 1) / D ** (r + 1)


def H_second_partial(a, b, p, q, index: int) -> float:
    """Closed-form ∂²H/∂x_index² with x = (a, b), by the quotient rule."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    x = np.concatenate([a, b])
    w = _weights(a.size, b.size)
    t, wi = x[index], w[index]
    N = np.sum(w * x ** p)
    D = np.sum(w * x ** q)
    r = p / q
    N1 = wi * p * t ** (p - 1)
    N2 = wi * p * (p - 1) * t ** (p - 2)
    D1 = wi * q * t ** (q - 1)
    D2 = wi * q * (q - 1) * t ** (q - 2)
    return float(N2 / D ** r - 2 * r * N1 * D1 / D ** (r + 1)
                 + r * (r + 1) * N * D1 ** 2 / D ** (r + 2) - r * N * D2 / D ** (r + 1))


def coordinate_derivative(t, alpha, beta, p, q) -> float:
    """f'(t) for f(t) = (alpha + t^p) / (beta + t^q)^{p/q}."""
    return (p * t ** (p - 1) / (beta + t ** q) ** (p / q)
            - p * (alpha + t ** p) * t ** (q - 1) / (beta + t ** q) ** (1 + p / q))


def coordinate_second_derivative(t, alpha, p, q) -> float:
    """f''(t) for f(t) = (alpha + t^p)/(alpha + t^q)^{p/q}, i.e. the case where
    the critical point of f sits at t = 1."""
    den = alpha + t ** q
    return (alpha * p * ((p - 1) * t ** (p - 2) - (q - 1) * t ** (q - 2)) / den ** (1 + p / q)
            - alpha * p * (p + q) * (t ** (p - 1) - t ** (q - 1)) * t ** (q - 1) / den ** (2 + p / q))


def H_second_derivative_at_critical(alpha: float, p: float, q: float) -> float:
    """alpha p (p - q) / (alpha + 1)^{1 + p/q}: f''(1) when f'(1) = 0 and the
    other coefficients carry mass alpha."""
    if not alpha > 0:
        raise InvalidParameters(f"alpha must be positive (needs k + l > 1), got {alpha}")
    return alpha * p * (p - q) / (alpha + 1.0) ** (1.0 + p / q)


def H_second_partial_at_critical(a, b, p, q, index: int) -> float:
    """∂²H/∂x_index² at a point where coordinate ``index`` is critical.

    Along that coordinate H = (A + w t^p)/(B + w t^q)^{p/q}.  Writing
    t = t* s with t*^{q-p} = B/A turns it into w^{1-p/q} f(s) with
    f(s) = (alpha + s^p)/(alpha + s^q)^{p/q}, alpha = A/(w t*^p), whose
    critical point is s = 1.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    x = np.concatenate([a, b])
    w = _weights(a.size, b.size)
    mask = np.arange(x.size) != index
    A = np.sum(w[mask] * x[mask] ** p)
    B = np.sum(w[mask] * x[mask] ** q)
    wi = w[index]
    t_star = (B / A) ** (1.0 / (q - p))
    alpha = A / (wi * t_star ** p)
    return float(wi ** (1.0 - p / q) * H_second_derivative_at_critical(alpha, p, q) / t_star ** 2)


def H_hessian_fd(a, b, p, q, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Hessian of H in (a, b)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    k = a.size
    x0 = np.concatenate([a, b])
    m = x0.size

    def f(x):
        return H(x[:k], x[k:], p, q)

    hess = np.empty((m, m))
    f0 = f(x0)
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = step
        hess[i, i] = (f(x0 + ei) - 2 * f0 + f(x0 - ei)) / step ** 2
        for j in range(i + 1, m):
            ej = np.zeros(m)
            ej[j] = step
            v = (f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4 * step ** 2)
            hess[i, j] = hess[j, i] = v
    return hess


def critical_coordinate(a, b, p, q, index: int) -> float:
    """Value of coordinate ``index`` at which ∂H/∂x_index = 0, the others fixed.

    With alpha and beta the weighted p- and q-masses of the other
    coefficients, f'(t) = 0 reduces to t^{q-p} = beta / alpha.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    x = np.concatenate([a, b])
    w = _weights(a.size, b.size)
    mask = np.arange(x.size) != index
    alpha = np.sum(w[mask] * x[mask] ** p)
    beta = np.sum(w[mask] * x[mask] ** q)
    if not alpha > 0:
        raise InvalidParameters("a critical coordinate needs at least two coefficients")
    return float((beta / alpha) ** (1.0 / (q - p)))


def reference_level(k: int, l: int, p: float, q: float, S0: float) -> float:
    """(k + l/2)^{1 - p/q} S0."""
    if k < 0 or l < 0 or k + l < 1:
        raise InvalidParameters(f"need k + l >= 1, got k={k}, l={l}")
    return (k + 0.5 * l) ** (1.0 - p / q) * S0


def eta_seam_gaps(params: EtaParams) -> dict:
    """One-sided value and derivative jumps of eta at both seams."""
    a = params.alpha
    out = {}
    for name, t in (("low", 0.5 * a), ("high", 2.0 * a)):
        lo_v, lo_d = eta(math.nextafter(t, -math.inf), params)
        hi_v, hi_d = eta(math.nextafter(t, math.inf), params)
        out[name] = (abs(hi_v - lo_v), abs(hi_d - lo_d))
    return out
