"""Cell-centred grids on rectangles, the regularized p-Laplacian and quadrature.

All difference operators take a ``scale`` argument: derivatives are taken with
respect to ``y = x / scale``, so ``scale=epsilon`` gives the stretched
coordinates in which the flow is integrated while ``scale=1`` gives plain x
derivatives.

The discrete energy and the operator are built so that one is exactly the
gradient of the other.  A cell's energy density is the mean of
``(s + gx^2 + gy^2)^{p/2}`` over the 2^n one-sided difference combinations
(the difference across a Neumann face is zero), and the flux through a face
uses the mean of ``(s + g_normal^2 + g_tangential^2)^{(p-2)/2}`` over the four
tangential differences touching that face.  With these choices

    d/du_i [ (1/p) sum_j vol * density_j ] = -vol * (div flux)_i

holds to rounding, which makes the semi-discrete flow a true gradient flow.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import ClassVar

import numpy as np
import scipy.sparse as sp

from .errors import InvalidParameters, NumericalOverflow

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on [0, L_1] x ... x [0, L_n], n in {1, 2}."""

    lengths: tuple
    cells: tuple

    MAX_CELLS: ClassVar[int] = 4_000_000

    def __post_init__(self):
        lengths = tuple(float(v) for v in np.atleast_1d(self.lengths))
        cells = tuple(int(v) for v in np.atleast_1d(self.cells))
        if len(lengths) != len(cells) or len(cells) not in (1, 2):
            raise InvalidParameters(f"grid must be 1D or 2D with matching lengths/cells, got {lengths}, {cells}")
        if any(c < 8 for c in cells):
            raise InvalidParameters(f"need at least 8 cells per axis, got {cells}")
        if any(not (v > 0 and np.isfinite(v)) for v in lengths):
            raise InvalidParameters(f"side lengths must be positive, got {lengths}")
        if int(np.prod(cells)) > self.MAX_CELLS:
            raise InvalidParameters(f"{int(np.prod(cells))} cells exceed the cap of {self.MAX_CELLS}")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "cells", cells)

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def h(self) -> tuple:
        return tuple(L / c for L, c in zip(self.lengths, self.cells))

    @property
    def shape(self) -> tuple:
        return self.cells

    def cell_volume(self, scale: float = 1.0) -> float:
        return float(np.prod([h / scale for h in self.h]))

    def centers(self) -> list:
        return [(np.arange(c) + 0.5) * h for c, h in zip(self.cells, self.h)]

    def mesh(self) -> list:
        return np.meshgrid(*self.centers(), indexing="ij")

    def index_of(self, point) -> tuple:
        """Index of the cell containing ``point`` (clipped to the grid)."""
        point = np.atleast_1d(point)
        return tuple(int(np.clip(np.floor(x / h), 0, c - 1))
                     for x, h, c in zip(point, self.h, self.cells))

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.lengths, tuple(c * factor for c in self.cells))


@dataclass(frozen=True)
class Field:
    """Cell values on a grid, tagged with the scale epsilon."""

    grid: Grid
    values: np.ndarray
    epsilon: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise InvalidParameters(f"values of shape {v.shape} do not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericalOverflow("field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def with_values(self, values) -> "Field":
        return Field(self.grid, values, self.epsilon)

    def __add__(self, other):
        if isinstance(other, Field):
            other = other.values
        return self.with_values(self.values + other)

    def __mul__(self, c):
        return self.with_values(self.values * c)

    __rmul__ = __mul__

    def max(self) -> float:
        return float(self.values.max())


def neumann_extend(field: Field) -> np.ndarray:
    """Values with one mirrored ghost layer on every face (even extension)."""
    return np.pad(field.values, 1, mode="symmetric")


def _face_diffs(u, hs):
    """Normal differences across interior faces, one array per axis."""
    return [np.diff(u, axis=a) / hs[a] for a in range(u.ndim)]


def _padded(g, axis):
    """Face array extended by the zero differences across the two boundary faces."""
    pad = [(0, 0)] * g.ndim
    pad[axis] = (1, 1)
    return np.pad(g, pad)


def _pow(base, e):
    # base**e with 0**negative treated as 0 (the flux multiplies it by 0 anyway)
    if e >= 0:
        return base ** e
    out = np.zeros_like(base)
    np.power(base, e, out=out, where=base > 0)
    return out


def face_coefficients(values, hs, p, s_bar):
    """Per-axis face diffusivities and normal differences.

    Returns ``(coefs, diffs)``; ``coefs[a]`` and ``diffs[a]`` live on the
    interior faces normal to axis ``a``.
    """
    g = _face_diffs(values, hs)
    e = 0.5 * (p - 2.0)
    if values.ndim == 1:
        return [_pow(s_bar + g[0] ** 2, e)], g
    coefs = []
    for a in range(2):
        b = 1 - a
        # tangential differences at the cells on both sides of each a-face
        t = np.moveaxis(_padded(g[b], b), (a, b), (0, 1))
        tk = (t[:-1, :-1], t[:-1, 1:], t[1:, :-1], t[1:, 1:])
        gn = np.moveaxis(g[a], (a, b), (0, 1))
        c = sum(_pow(s_bar + gn ** 2 + x ** 2, e) for x in tk) / 4.0
        coefs.append(np.moveaxis(c, (0, 1), (a, b)))
    return coefs, g


def _divergence(fluxes, hs, shape):
    out = np.zeros(shape)
    for a, f in enumerate(fluxes):
        out += np.diff(_padded(f, a), axis=a) / hs[a]
    return out


def p_laplacian_values(values, hs, p, s_bar):
    coefs, g = face_coefficients(values, hs, p, s_bar)
    out = _divergence([c * d for c, d in zip(coefs, g)], hs, values.shape)
    if not np.all(np.isfinite(out)):
        raise NumericalOverflow("p-Laplacian produced non-finite values")
    return out


def p_laplacian_s(field: Field, p: float, s_bar: float, scale: float = 1.0) -> Field:
    """div((s + |Du|^2)^{(p-2)/2} Du) in conservative flux form, zero-flux faces."""
    if not p > 1:
        raise InvalidParameters(f"need p > 1, got {p}")
    if s_bar < 0:
        raise InvalidParameters(f"s_bar must be nonnegative, got {s_bar}")
    hs = [h / scale for h in field.grid.h]
    return field.with_values(p_laplacian_values(field.values, hs, p, s_bar))


def energy_density_values(values, hs, p, s_bar):
    g = _face_diffs(values, hs)
    if values.ndim == 1:
        G = _padded(g[0], 0)
        return 0.5 * ((s_bar + G[1:] ** 2) ** (0.5 * p) + (s_bar + G[:-1] ** 2) ** (0.5 * p))
    G0 = _padded(g[0], 0)
    G1 = _padded(g[1], 1)
    dens = 0.0
    for gx in (G0[1:], G0[:-1]):
        for gy in (G1[:, 1:], G1[:, :-1]):
            dens = dens + (s_bar + gx ** 2 + gy ** 2) ** (0.5 * p)
    return dens / 4.0


def grad_energy_density(field: Field, p: float, s_bar: float, scale: float = 1.0) -> Field:
    """Cell values of (s + |Du|^2)^{p/2}, averaged over one-sided differences."""
    hs = [h / scale for h in field.grid.h]
    return field.with_values(energy_density_values(field.values, hs, p, s_bar))


def integrate(field: Field, exponent: float = 1.0, scale: float = 1.0) -> float:
    """Midpoint rule for ∫ u^exponent, volume measured in x/scale units."""
    v = field.values
    if exponent != 1.0:
        v = v ** exponent
    return float(np.sum(v) * field.grid.cell_volume(scale))


def diffusion_matrix(coefs, hs, shape) -> sp.csr_matrix:
    """Sparse matrix of u -> div(c Du) for frozen face coefficients ``coefs``."""
    size = int(np.prod(shape))
    idx = np.arange(size).reshape(shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(size)
    for a, c in enumerate(coefs):
        lo = np.take(idx, np.arange(shape[a] - 1), axis=a).ravel()
        hi = np.take(idx, np.arange(1, shape[a]), axis=a).ravel()
        w = c.ravel() / hs[a] ** 2
        rows += [lo, hi]
        cols += [hi, lo]
        vals += [w, w]
        np.subtract.at(diag, lo, w)
        np.subtract.at(diag, hi, w)
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(size, size))


def holder_quotient(field: Field, gamma: float = 0.5, scale: float = 1.0) -> float:
    """sup|u| plus the largest neighbour difference quotient |du| / |dy|^gamma."""
    q = float(np.abs(field.values).max())
    worst = 0.0
    for a, h in enumerate(field.grid.h):
        d = np.abs(np.diff(field.values, axis=a))
        if d.size:
            worst = max(worst, float(d.max()) / (h / scale) ** gamma)
    return q + worst


# -- snapshot files ---------------------------------------------------------

def pkfld_header(field: Field, t: float = 0.0) -> str:
    g = field.grid
    return (f"PKFLD n={g.n} cells={','.join(str(c) for c in g.cells)} "
            f"lengths={','.join(repr(v) for v in g.lengths)} "
            f"epsilon={field.epsilon!r} t={float(t)!r}")


def write_pkfld(field: Field, path, t: float = 0.0) -> None:
    """Write the ASCII header line followed by little-endian float64 cell values."""
    with open(path, "wb") as fh:
        fh.write((pkfld_header(field, t) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes(order="C"))


def parse_pkfld_header(line: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != "PKFLD":
        raise InvalidParameters("not a PKFLD file")
    meta = dict(tok.split("=", 1) for tok in parts[1:])
    return {
        "n": int(meta["n"]),
        "cells": tuple(int(v) for v in meta["cells"].split(",")),
        "lengths": tuple(float(v) for v in meta["lengths"].split(",")),
        "epsilon": float(meta["epsilon"]),
        "t": float(meta["t"]),
    }


def read_pkfld(path):
    """Return ``(field, t)`` from a PKFLD snapshot."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    meta = parse_pkfld_header(raw[:nl].decode("ascii"))
    grid = Grid(meta["lengths"], meta["cells"])
    vals = np.frombuffer(raw[nl + 1:], dtype="<f8")
    if vals.size != int(np.prod(grid.cells)):
        raise InvalidParameters(f"PKFLD payload has {vals.size} values, expected {np.prod(grid.cells)}")
    return Field(grid, vals.reshape(grid.cells), meta["epsilon"]), meta["t"]


def write_field_csv(field: Field, path, t: float = 0.0) -> None:
    """CSV mirror of a snapshot: header comment, then cell centre coordinates and value."""
    g = field.grid
    mesh = g.mesh()
    names = [f"x{i + 1}" for i in range(g.n)] + ["u"]
    with open(path, "w", newline="") as fh:
        fh.write("# " + pkfld_header(field, t) + "\n")
        wr = csv.writer(fh)
        wr.writerow(names)
        cols = [m.ravel() for m in mesh] + [field.values.ravel()]
        for row in zip(*cols):
            wr.writerow([repr(float(v)) for v in row])
