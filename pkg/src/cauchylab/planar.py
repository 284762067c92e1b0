"""Two-dimensional tools: Beltrami coefficients, stream functions, harmonic
measure, and the planar three-circles exponents.

A solution u of div(A grad u) = 0 in the plane pairs with a stream function v
(grad v = J A grad u, J the quarter turn), and f = u + iv solves a Beltrami
equation f_zbar = mu f_z + nu conj(f_z). The coefficient dictionaries

    mu = (a22 - a11 - i(a12 + a21)) / d,
    nu = (a12 a21 - a11 a22 + 1 + i(a12 - a21)) / d,
    d  = a11 a22 - a12 a21 + a11 + a22 + 1,

and their inverse are exact rational maps; |mu| + |nu| <= k < 1 with
k <= (K + sqrt(K^2-1) - 1)/(K + sqrt(K^2-1) + 1) in terms of the two-sided
ellipticity constant K. Harmonic measure of a boundary portion is computed as
a Dirichlet solve with a mollified indicator, and yields the interior Holder
bound |u(z)| <= E^(1-omega(z)) eta^omega(z) for Cauchy data small on the
portion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import LipschitzPortion
from .pde import (
    CoefficientField,
    DiscreteSolution,
    RectGrid,
    discrete_residual,
    identity_coefficient,
    NO_SOURCE,
    solve_dirichlet,
    solution_to_csv,
)

__all__ = [
    "PlanarError",
    "BeltramiPair",
    "beltrami_from_matrix",
    "matrix_from_beltrami",
    "two_sided_ellipticity",
    "k_bound",
    "subharmonic_coefficient",
    "conjugate_coefficient",
    "stream_function",
    "HarmonicMeasureField",
    "harmonic_measure",
    "interior_cauchy_bound",
    "ThreeCirclesExponents",
    "three_circles_exponents",
    "exponents_to_csv",
]


class PlanarError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Beltrami coefficient algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeltramiPair:
    """Coefficients of f_zbar = mu f_z + nu conj(f_z) with |mu|+|nu| < 1."""

    mu: complex
    nu: complex

    def __post_init__(self):
        if not self.k < 1.0:
            raise PlanarError(f"|mu|+|nu| = {self.k} is not < 1")

    @property
    def k(self):
        return abs(self.mu) + abs(self.nu)


def two_sided_ellipticity(A):
    """Smallest K with A xi.xi >= |xi|^2/K and A^-1 xi.xi >= |xi|^2/K."""
    a = np.asarray(A, dtype=float)
    lo = np.linalg.eigvalsh(0.5 * (a + a.T))[0]
    if lo <= 0:
        raise PlanarError("matrix is not elliptic")
    inv = np.linalg.inv(a)
    lo_inv = np.linalg.eigvalsh(0.5 * (inv + inv.T))[0]
    if lo_inv <= 0:
        raise PlanarError("matrix is not elliptic")
    return max(1.0 / lo, 1.0 / lo_inv)


def k_bound(K):
    """Sharp bound on |mu|+|nu| over matrices of ellipticity K."""
    if K < 1.0:
        raise PlanarError("ellipticity constant must be >= 1")
    s = K + math.sqrt(K * K - 1.0)
    return (s - 1.0) / (s + 1.0)


def beltrami_from_matrix(A):
    a = np.asarray(A, dtype=float)
    if a.shape != (2, 2):
        raise PlanarError("coefficient matrix must be 2x2")
    a11, a12, a21, a22 = a[0, 0], a[0, 1], a[1, 0], a[1, 1]
    d = a11 * a22 - a12 * a21 + a11 + a22 + 1.0
    if d <= 0:
        raise PlanarError("matrix is not elliptic: denominator <= 0")
    mu = complex(a22 - a11, -(a12 + a21)) / d
    nu = complex(a12 * a21 - a11 * a22 + 1.0, a12 - a21) / d
    pair = BeltramiPair(mu, nu)
    bound = k_bound(two_sided_ellipticity(a))
    if pair.k > bound + 1e-9:
        raise PlanarError(
            f"|mu|+|nu| = {pair.k} exceeds the ellipticity bound {bound}"
        )
    return pair


def matrix_from_beltrami(pair):
    mu, nu = pair.mu, pair.nu
    d = abs(1.0 + nu) ** 2 - abs(mu) ** 2
    if abs(d) < 1e-14:
        raise PlanarError("singular denominator |1+nu|^2 - |mu|^2")
    return np.array(
        [
            [(abs(1.0 - mu) ** 2 - abs(nu) ** 2) / d, 2.0 * (nu - mu).imag / d],
            [-2.0 * (mu + nu).imag / d, (abs(1.0 + mu) ** 2 - abs(nu) ** 2) / d],
        ]
    )


def subharmonic_coefficient(mu, nu, fz=None):
    """Symmetric unit-determinant matrix making log|f| subharmonic.

    Where the derivative f_z is negligible the reduced coefficient is mu
    alone; otherwise mu + nu conj(f_z)/f_z.
    """
    if fz is None or abs(fz) <= 1e-12:
        mu1 = mu
    else:
        mu1 = mu + nu * np.conjugate(fz) / fz
    return matrix_from_beltrami(BeltramiPair(mu1, 0.0))


def conjugate_coefficient(A):
    """Field B = (det A)^-1 A^T solved by the stream function."""

    def matrix(pts):
        a = A(pts)
        det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
        return np.swapaxes(a, -1, -2) / det[..., None, None]

    return CoefficientField(matrix, label="conjugate")


# ---------------------------------------------------------------------------
# stream function
# ---------------------------------------------------------------------------


def stream_function(u, A, anchor=(0.0, 0.0)):
    """Least-squares potential v with grad v = J A grad u, v(anchor) = 0.

    Solves the normal equations of the edgewise gradient fit on the valid
    cell graph; requires a simply connected mask (otherwise v would be
    multivalued). The result lives on the cell-center lattice; meta carries
    the RMS gradient mismatch and the residual of div(B grad v) = 0 with
    B = (det A)^-1 A^T.
    """
    cells = u.valid_cells()
    if not cells.any():
        raise PlanarError("solution has no valid cells")
    ncomp = ndi.label(cells)[0].max()
    if ncomp != 1:
        raise PlanarError("cell mask must be connected")
    holes, nh = ndi.label(~cells)
    border = set(np.concatenate([holes[0], holes[-1], holes[:, 0], holes[:, -1]]))
    if any(lab not in border for lab in range(1, nh + 1)):
        raise PlanarError(
            "cell mask is multiply connected: stream function is multivalued"
        )

    g = u.grid
    h = g.h
    centers = g.cell_centers()
    gx, gy = u.cell_gradients()
    amat = A(centers)
    fx = amat[..., 0, 0] * gx + amat[..., 0, 1] * gy
    fy = amat[..., 1, 0] * gx + amat[..., 1, 1] * gy
    wx, wy = -fy, fx  # quarter-turn rotation of the flux

    idx = -np.ones(cells.shape, dtype=np.int64)
    idx[cells] = np.arange(int(cells.sum()))
    rows, cols, vals, rhs = [], [], [], []

    def add_edges(ia, ja, ib, jb, w):
        target = 0.5 * (w[ia, ja] + w[ib, jb])
        eq0 = len(rhs)
        for ii, jj, s in ((ia, ja, -1.0), (ib, jb, 1.0)):
            rows.extend(eq0 + np.arange(target.size))
            cols.extend(idx[ii, jj])
            vals.extend(np.full(target.size, s / h))
        rhs.extend(target)

    i, j = np.nonzero(cells[:, :-1] & cells[:, 1:])
    add_edges(i, j, i, j + 1, wx)
    i, j = np.nonzero(cells[:-1, :] & cells[1:, :])
    add_edges(i, j, i + 1, j, wy)

    nun = int(cells.sum())
    M = sp.coo_matrix(
        (np.asarray(vals), (np.asarray(rows), np.asarray(cols))),
        shape=(len(rhs), nun),
    ).tocsr()
    b = np.asarray(rhs)
    L = (M.T @ M).tocsc()
    # pin the gauge at the cell nearest the anchor
    anchor = np.asarray(anchor, dtype=float)
    d2 = (centers[..., 0] - anchor[0]) ** 2 + (centers[..., 1] - anchor[1]) ** 2
    d2 = np.where(cells, d2, np.inf)
    pin = int(idx[np.unravel_index(np.argmin(d2), d2.shape)])
    scale = L.diagonal().max()
    L = L.tolil()
    L[pin, :] = 0.0
    L[:, pin] = 0.0
    L[pin, pin] = scale
    rhs_n = M.T @ b
    rhs_n[pin] = 0.0
    v = spla.splu(L.tocsc()).solve(rhs_n)
    mismatch = M @ v - b
    rms = float(math.sqrt(np.mean(mismatch**2))) if b.size else 0.0

    vgrid = RectGrid(g.x0 + 0.5 * h, g.y0 + 0.5 * h, h, g.nx - 1, g.ny - 1)
    values = np.full(cells.shape, np.nan)
    values[cells] = v
    out = DiscreteSolution(
        grid=vgrid,
        values=values,
        active=cells,
        unknown=cells,
        residual=rms,
        iterations=0,
        symmetric=True,
        meta={},
    )
    at_anchor = out.interpolate(anchor[None])[0]
    if np.isfinite(at_anchor):
        values[cells] -= at_anchor
    b_res = discrete_residual(values, vgrid, conjugate_coefficient(A))
    out.meta.update(grad_residual=rms, b_equation_residual=float(b_res))
    return out


# ---------------------------------------------------------------------------
# harmonic measure
# ---------------------------------------------------------------------------


def _dist_to_lines(pts, lines):
    pts = np.asarray(pts, dtype=float)
    best = np.full(pts.shape[:-1], np.inf)
    for line in lines:
        a, b = line[:-1], line[1:]
        ab = b - a
        ab2 = np.maximum(np.sum(ab**2, axis=1), 1e-300)
        ap = pts[..., None, :] - a
        t = np.clip(np.sum(ap * ab, axis=-1) / ab2, 0.0, 1.0)
        proj = a + t[..., None] * ab
        d = np.linalg.norm(pts[..., None, :] - proj, axis=-1).min(axis=-1)
        best = np.minimum(best, d)
    return best


@dataclass
class HarmonicMeasureField:
    """Grid harmonic measure of a boundary portion, clamped to [0, 1]."""

    solution: DiscreteSolution
    portion: LipschitzPortion
    smoothing: float
    max_clamp: float
    notes: list = field(default_factory=list)

    def value(self, pts):
        return np.clip(self.solution.interpolate(pts), 0.0, 1.0)

    def to_csv(self, path):
        solution_to_csv(self.solution, path)


def harmonic_measure(domain, portion, A1=None, smoothing=0.02, grid=None, n=256):
    """Dirichlet solve with the mollified indicator of the portion as data.

    The indicator transitions linearly over ``2 * smoothing`` around the
    interface between the portion and its complement; negative undershoots
    are clamped to zero and the largest clamp is reported.
    """
    if A1 is None:
        A1 = identity_coefficient()
    sig = np.asarray(portion.sigma, dtype=float)
    if float(np.linalg.norm(np.diff(sig, axis=0), axis=1).sum()) <= 0:
        raise PlanarError("portion has zero arc length")
    prime_len = sum(
        float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())
        for p in portion.sigma_prime
    )
    if prime_len <= 0:
        raise PlanarError("portion complement has zero arc length")
    if smoothing < 0:
        raise PlanarError("smoothing width must be >= 0")

    def indicator(pts):
        d_in = _dist_to_lines(pts, [sig])
        d_out = _dist_to_lines(pts, portion.sigma_prime)
        if smoothing == 0:
            return (d_in < d_out).astype(float)
        return np.clip(0.5 + (d_out - d_in) / (2.0 * smoothing), 0.0, 1.0)

    sol = solve_dirichlet(domain, A1, 0.0, NO_SOURCE, indicator, grid=grid, n=n)
    vals = sol.values
    finite = np.isfinite(vals)
    clamp_lo = max(0.0, float(-np.min(vals[finite], initial=0.0)))
    clamp_hi = max(0.0, float(np.max(vals[finite], initial=1.0) - 1.0))
    vals[finite] = np.clip(vals[finite], 0.0, 1.0)
    return HarmonicMeasureField(
        solution=sol,
        portion=portion,
        smoothing=smoothing,
        max_clamp=max(clamp_lo, clamp_hi),
    )


def interior_cauchy_bound(E, eta, omega, z=None):
    """Interior Holder bound E^(1-omega(z)) eta^omega(z) for 0 < eta <= E."""
    if not 0 < eta <= E:
        raise PlanarError("need 0 < eta <= E")
    if isinstance(omega, HarmonicMeasureField):
        if z is None:
            raise PlanarError("a point is required with a measure field")
        w = float(omega.value(np.asarray(z, dtype=float)[None])[0])
    else:
        w = float(omega)
    if not 0.0 <= w <= 1.0 or not np.isfinite(w):
        raise PlanarError(f"harmonic measure value {w} outside [0, 1]")
    return E ** (1.0 - w) * eta**w


# ---------------------------------------------------------------------------
# three-circles exponents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThreeCirclesExponents:
    r1: float
    r2: float
    r3: float
    alpha_holo: float
    alpha_harm: float
    C2: float
    C3: float
    alpha_qc: float
    r1_tilde: float
    r2_tilde: float

    def harmonic_bound(self, n1, n3):
        """Middle-circle sup bound ((C2+1) n1)^a ((C3+1) n3)^(1-a)."""
        a = self.alpha_harm
        return ((self.C2 + 1.0) * n1) ** a * ((self.C3 + 1.0) * n3) ** (1.0 - a)


def three_circles_exponents(r1, r2, r3, C1=1.0, beta=1.0):
    """Interpolation exponents for holomorphic, harmonic, and quasiconformal
    three-circles inequalities; (C1, beta) are the Holder constants of the
    normalizing quasiconformal map (conformal degenerate default 1, 1)."""
    if not 0 < r1 < r2 < r3:
        raise PlanarError("radii must satisfy 0 < r1 < r2 < r3")
    if not (C1 >= 1.0 and 0 < beta <= 1.0):
        raise PlanarError("need C1 >= 1 and beta in (0, 1]")
    alpha_holo = math.log(r3 / r2) / math.log(r3 / r1)
    q = r2 / r3
    alpha_harm = math.log(0.5 + r3 / (2.0 * r2)) / math.log((1.0 + q) * (r3 / r1))
    C2 = (2.0 / math.pi) * math.log(3.0)
    C3 = (2.0 / math.pi) * math.log((3.0 + q) / (1.0 - q))
    r1t = (r1 / (C1 * r3)) ** (1.0 / beta)
    r2t = 1.0 - ((1.0 - q) / C1) ** (1.0 / beta)
    if not 0 < r1t < r2t < 1:
        raise PlanarError(
            "Holder constants too weak for these radii: need r1~ < r2~ < 1"
        )
    alpha_qc = math.log(1.0 / r2t) / math.log(1.0 / r1t)
    return ThreeCirclesExponents(
        r1=r1,
        r2=r2,
        r3=r3,
        alpha_holo=alpha_holo,
        alpha_harm=alpha_harm,
        C2=C2,
        C3=C3,
        alpha_qc=alpha_qc,
        r1_tilde=r1t,
        r2_tilde=r2t,
    )


def exponents_to_csv(tables, path):
    lines = ["r1,r2,r3,alpha_holo,alpha_harm,alpha_qc"]
    for t in tables:
        lines.append(
            f"{t.r1!r},{t.r2!r},{t.r3!r},"
            f"{t.alpha_holo!r},{t.alpha_harm!r},{t.alpha_qc!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
