"""Finite-volume machinery for div(A grad u) + c u = f + div F on the plane.

Discretization: five-point flux stencil on a uniform node grid with
harmonic-mean face coefficients. Grid-aligned Dirichlet boundaries keep the
system symmetric and are solved with diagonally preconditioned conjugate
gradients (relative tolerance 1e-10, iteration cap 50 * sqrt(#unknowns));
curved boundaries get Shortley-Weller corrected stencils, which are
nonsymmetric, and are solved with sparse LU. Homogeneous Neumann walls are
supported on bounding-box sides via half control volumes.

Norms follow the scale-normalized convention: with dimension n = 2,

    ||u||_{L2} = rho0^{-n/2} (int u^2)^{1/2},
    ||u||_{H1} = rho0^{-n/2} (int u^2 + rho0^2 int |grad u|^2)^{1/2},

and boundary trace norms use the spectral decomposition of the 1-d
Laplace-Beltrami operator along the arclength-parametrized portion:

    ||g||^2_{H^{+-1/2}} = rho0^{-1} sum_k (1 + rho0^2 lambda_k)^{+-1/2} g_k^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Rectangle

__all__ = [
    "PDEError",
    "SolverConvergenceError",
    "IndefiniteOperatorError",
    "UnsupportedCoefficientError",
    "CoefficientField",
    "identity_coefficient",
    "scalar_coefficient",
    "diagonal_coefficient",
    "matrix_coefficient",
    "coefficient_from_config",
    "SourceData",
    "NO_SOURCE",
    "RectGrid",
    "grid_for_domain",
    "grid_aligned_box",
    "DiscreteSolution",
    "DirichletSystem",
    "solve_dirichlet",
    "discrete_residual",
    "norm_l2",
    "norm_h1",
    "l2_on_ball",
    "trace_norm",
    "trace_duality_gap",
    "solution_to_csv",
]

CG_RTOL = 1e-10
CG_CAP_FACTOR = 50


class PDEError(RuntimeError):
    pass


class SolverConvergenceError(PDEError):
    def __init__(self, iterations, residual):
        super().__init__(
            f"CG did not reach rtol {CG_RTOL:g} in {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


class IndefiniteOperatorError(PDEError):
    def __init__(self):
        super().__init__("operator is not positive definite (p.Ap <= 0 in CG)")


class UnsupportedCoefficientError(PDEError):
    pass


# ---------------------------------------------------------------------------
# coefficient fields and sources
# ---------------------------------------------------------------------------


@dataclass
class CoefficientField:
    """Matrix coefficient A(x), evaluated pointwise on (..., 2) point arrays."""

    matrix: object  # callable pts -> (..., 2, 2)
    label: str = "custom"

    def __call__(self, pts):
        return np.asarray(self.matrix(np.asarray(pts, dtype=float)), dtype=float)

    def is_diagonal(self, pts, tol=1e-12):
        a = self(pts)
        off = max(np.abs(a[..., 0, 1]).max(), np.abs(a[..., 1, 0]).max())
        return off <= tol * max(np.abs(a).max(), 1.0)

    def ellipticity(self, pts):
        """Smallest K with K^-1 |xi|^2 <= A xi.xi <= K |xi|^2 on the samples."""
        a = self(pts).reshape(-1, 2, 2)
        asym = 0.5 * (a + np.swapaxes(a, -1, -2))
        ev = np.linalg.eigvalsh(asym)
        lo, hi = float(ev[:, 0].min()), float(ev[:, 1].max())
        if lo <= 0:
            raise UnsupportedCoefficientError("coefficient is not elliptic")
        return max(hi, 1.0 / lo)

    def lipschitz_estimate(self, pts, rho0=1.0):
        """L with |A(x) - A(y)| <= (L/rho0)|x - y| from finite differences."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        dh = 1e-5
        worst = 0.0
        for d in (np.array([dh, 0.0]), np.array([0.0, dh])):
            da = (self(pts + d) - self(pts)) / dh
            worst = max(worst, float(np.abs(da).max()))
        return worst * rho0


def identity_coefficient():
    return CoefficientField(
        lambda pts: np.broadcast_to(np.eye(2), np.shape(pts)[:-1] + (2, 2)).copy(),
        label="identity",
    )


def scalar_coefficient(fn):
    """A(x) = a(x) * Identity for a scalar callable or constant."""
    if np.isscalar(fn):
        val = float(fn)
        fn = lambda pts: np.full(np.shape(pts)[:-1], val)  # noqa: E731

    def matrix(pts):
        a = np.asarray(fn(np.asarray(pts, dtype=float)), dtype=float)
        out = np.zeros(a.shape + (2, 2))
        out[..., 0, 0] = a
        out[..., 1, 1] = a
        return out

    return CoefficientField(matrix, label="scalar")


def diagonal_coefficient(f11, f22):
    def _wrap(f):
        if np.isscalar(f):
            v = float(f)
            return lambda pts: np.full(np.shape(pts)[:-1], v)
        return f

    f11, f22 = _wrap(f11), _wrap(f22)

    def matrix(pts):
        pts = np.asarray(pts, dtype=float)
        a = np.asarray(f11(pts), dtype=float)
        out = np.zeros(a.shape + (2, 2))
        out[..., 0, 0] = a
        out[..., 1, 1] = np.asarray(f22(pts), dtype=float)
        return out

    return CoefficientField(matrix, label="diagonal")


def matrix_coefficient(mat):
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (2, 2):
        raise UnsupportedCoefficientError("constant matrix must be 2x2")

    def matrix(pts):
        return np.broadcast_to(mat, np.shape(pts)[:-1] + (2, 2)).copy()

    return CoefficientField(matrix, label="constant")


def coefficient_from_config(cfg):
    """Build A from a key=value mapping (one section of a config file)."""
    kind = cfg.get("kind", "identity")
    if kind == "identity":
        return identity_coefficient()
    if kind == "constant":
        a12 = float(cfg.get("a12", 0.0))
        return matrix_coefficient(
            [
                [float(cfg.get("a11", 1.0)), a12],
                [float(cfg.get("a21", a12)), float(cfg.get("a22", 1.0))],
            ]
        )
    if kind == "radial":
        base = float(cfg.get("base", 1.0))
        slope = float(cfg.get("slope", 0.0))
        return scalar_coefficient(
            lambda pts: base + slope * np.hypot(pts[..., 0], pts[..., 1])
        )
    raise UnsupportedCoefficientError(f"unknown coefficient kind {kind!r}")


@dataclass
class SourceData:
    """Right-hand side f + div F; f scalar, F vector, callables or constants."""

    f: object = 0.0
    F: object = None

    def f_at(self, pts):
        if callable(self.f):
            return np.asarray(self.f(np.asarray(pts, dtype=float)), dtype=float)
        return np.full(np.shape(pts)[:-1], float(self.f))

    def F_at(self, pts):
        if self.F is None:
            return np.zeros(np.shape(pts))
        if callable(self.F):
            return np.asarray(self.F(np.asarray(pts, dtype=float)), dtype=float)
        return np.broadcast_to(np.asarray(self.F, dtype=float), np.shape(pts)).copy()


NO_SOURCE = SourceData()


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RectGrid:
    """Uniform node grid: node (i, j) sits at (x0 + j h, y0 + i h)."""

    x0: float
    y0: float
    h: float
    nx: int
    ny: int

    def xs(self):
        return self.x0 + self.h * np.arange(self.nx)

    def ys(self):
        return self.y0 + self.h * np.arange(self.ny)

    def nodes(self):
        X, Y = np.meshgrid(self.xs(), self.ys())
        return np.stack([X, Y], axis=-1)

    def cell_centers(self):
        xs = self.x0 + self.h * (np.arange(self.nx - 1) + 0.5)
        ys = self.y0 + self.h * (np.arange(self.ny - 1) + 0.5)
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X, Y], axis=-1)


def grid_for_domain(domain, n=256, pad_cells=2):
    """Grid with n cells across the longer side; rectangle edges on nodes."""
    if isinstance(domain, Rectangle):
        h = max(domain.width, domain.height) / n
        nxc = round(domain.width / h)
        nyc = round(domain.height / h)
        if abs(nxc * h - domain.width) > 1e-9 * max(1.0, domain.width) or abs(
            nyc * h - domain.height
        ) > 1e-9 * max(1.0, domain.height):
            raise PDEError("rectangle sides are not commensurable with the grid")
        return RectGrid(0.0, 0.0, h, nxc + 1, nyc + 1)
    x0, y0, x1, y1 = domain.bounding_box()
    h = max(x1 - x0, y1 - y0) / n
    x0 -= pad_cells * h
    y0 -= pad_cells * h
    nx = int(math.ceil((x1 - x0) / h + pad_cells)) + 1
    ny = int(math.ceil((y1 - y0) / h + pad_cells)) + 1
    return RectGrid(x0, y0, h, nx, ny)


def grid_aligned_box(x0, y0, x1, ytop, n):
    """Grid whose vertical lines span [x0, x1] exactly with n cells.

    y starts at y0 exactly and extends one spare row past ytop, so the
    left/right/bottom walls fall on node lines while a curved top boundary
    cuts through the interior.
    """
    h = (x1 - x0) / n
    ny = int(math.ceil((ytop - y0) / h)) + 2
    return RectGrid(x0, y0, h, n + 1, ny)


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------


@dataclass
class DiscreteSolution:
    """Grid function plus the masks and residual of the solve that made it."""

    grid: RectGrid
    values: np.ndarray = field(repr=False)
    active: np.ndarray = field(repr=False)  # nodes carrying meaningful values
    unknown: np.ndarray = field(repr=False)  # nodes that were solved for
    residual: float = 0.0
    iterations: int = 0
    symmetric: bool = True
    meta: dict = field(default_factory=dict)

    def interpolate(self, pts):
        """Bilinear interpolation; NaN outside the grid hull."""
        pts = np.asarray(pts, dtype=float)
        g = self.grid
        fx = (pts[..., 0] - g.x0) / g.h
        fy = (pts[..., 1] - g.y0) / g.h
        j0 = np.clip(np.floor(fx).astype(int), 0, g.nx - 2)
        i0 = np.clip(np.floor(fy).astype(int), 0, g.ny - 2)
        tx = fx - j0
        ty = fy - i0
        v = self.values
        vals = (
            v[i0, j0] * (1 - tx) * (1 - ty)
            + v[i0, j0 + 1] * tx * (1 - ty)
            + v[i0 + 1, j0] * (1 - tx) * ty
            + v[i0 + 1, j0 + 1] * tx * ty
        )
        ok = (fx >= 0) & (fx <= g.nx - 1) & (fy >= 0) & (fy <= g.ny - 1)
        return np.where(ok, vals, np.nan)

    def cell_means(self):
        v = self.values
        return 0.25 * (v[:-1, :-1] + v[:-1, 1:] + v[1:, :-1] + v[1:, 1:])

    def cell_gradients(self):
        v = self.values
        h = self.grid.h
        gx = (v[:-1, 1:] + v[1:, 1:] - v[:-1, :-1] - v[1:, :-1]) / (2 * h)
        gy = (v[1:, :-1] + v[1:, 1:] - v[:-1, :-1] - v[:-1, 1:]) / (2 * h)
        return gx, gy

    def valid_cells(self):
        a = self.active
        return a[:-1, :-1] & a[:-1, 1:] & a[1:, :-1] & a[1:, 1:]


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def _pcg(A, b, tol=CG_RTOL, cap=None):
    n = b.size
    cap = cap if cap is not None else max(100, int(CG_CAP_FACTOR * math.sqrt(n)))
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    d = A.diagonal()
    if np.any(d <= 0):
        raise IndefiniteOperatorError()
    dinv = 1.0 / d
    x = np.zeros(n)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    rn = bnorm
    for it in range(1, cap + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise IndefiniteOperatorError()
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rn = float(np.linalg.norm(r))
        if rn <= tol * bnorm:
            return x, it, rn / bnorm
        z = dinv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverConvergenceError(cap, rn / bnorm)


_SIDES = ("left", "right", "bottom", "top")


def _wall_masks(domain, grid, neumann_sides):
    """Per-side boolean node masks for the requested Neumann walls."""
    bad = set(neumann_sides) - set(_SIDES)
    if bad:
        raise PDEError(f"unknown Neumann side(s): {sorted(bad)}")
    nodes = grid.nodes()
    X, Y = nodes[..., 0], nodes[..., 1]
    x0b, y0b, x1b, y1b = domain.bounding_box()
    eps = 1e-9 * grid.h
    zero = np.zeros(X.shape, dtype=bool)
    return {
        "left": (np.abs(X - x0b) < eps) if "left" in neumann_sides else zero,
        "right": (np.abs(X - x1b) < eps) if "right" in neumann_sides else zero,
        "bottom": (np.abs(Y - y0b) < eps) if "bottom" in neumann_sides else zero,
        "top": (np.abs(Y - y1b) < eps) if "top" in neumann_sides else zero,
    }


def _boundary_crossing(domain, p, q, iters=46):
    """Bisect for the exit parameter on segments p (inside) -> q (outside)."""
    lo = np.zeros(p.shape[0])
    hi = np.ones(p.shape[0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ins = domain.contains(p + mid[:, None] * (q - p))
        lo = np.where(ins, mid, lo)
        hi = np.where(ins, hi, mid)
    return hi


class DirichletSystem:
    """Assembled operator for one (domain, A, c, grid) combination.

    The matrix is built once; :meth:`solve` accepts different sources and
    Dirichlet data, reusing the factorization. Rows are control-volume flux
    balances scaled by h^2. Boundary cuts at fraction theta of a grid step
    use Shortley-Weller pair weights 2 a / (theta (theta_plus + theta_minus)),
    which reduce to plain harmonic-mean weights when all theta = 1.
    """

    def __init__(self, domain, A, c=0.0, grid=None, n=256, neumann_sides=()):
        self.domain = domain
        self.A = A
        self.grid = grid if grid is not None else grid_for_domain(domain, n)
        self.neumann_sides = tuple(neumann_sides)
        g = self.grid
        h = g.h
        nodes = g.nodes()
        ny, nx = g.ny, g.nx

        walls = _wall_masks(domain, g, self.neumann_sides)
        on_lr = walls["left"] | walls["right"]
        on_bt = walls["bottom"] | walls["top"]
        # inward nudge for membership tests at nodes sitting on a wall
        nudge = np.zeros_like(nodes)
        wall_eps = 1e-7 * h
        nudge[..., 0] += np.where(walls["left"], wall_eps, 0.0)
        nudge[..., 0] -= np.where(walls["right"], wall_eps, 0.0)
        nudge[..., 1] += np.where(walls["bottom"], wall_eps, 0.0)
        nudge[..., 1] -= np.where(walls["top"], wall_eps, 0.0)

        unknown = domain.contains(nodes)
        on_wall = on_lr | on_bt
        if on_wall.any():
            unknown |= on_wall & domain.contains(nodes + nudge)
        if not unknown.any():
            raise PDEError("no unknown nodes: grid too coarse for the domain")

        pts_check = nodes[unknown]
        step = max(1, pts_check.shape[0] // 500)
        if not A.is_diagonal(pts_check[::step]):
            raise UnsupportedCoefficientError(
                "five-point solver handles diagonal A only"
            )

        amat = A(nodes)
        a11, a22 = amat[..., 0, 0], amat[..., 1, 1]
        cvals = (
            np.asarray(c(nodes), dtype=float)
            if callable(c)
            else np.full((ny, nx), float(c))
        )

        volfrac = np.ones((ny, nx))
        volfrac[on_lr] *= 0.5
        volfrac[on_bt] *= 0.5

        idx = -np.ones((ny, nx), dtype=np.int64)
        nunk = int(unknown.sum())
        idx[unknown] = np.arange(nunk)
        ii, jj = np.nonzero(unknown)
        uidx = idx[ii, jj]

        rows, cols, vals = [], [], []
        diag = np.zeros(nunk)
        symmetric = True
        # per solve: rhs[bcrows[k]] += bcweights[k] * g(bcpts[k])
        bcrows, bcpts, bcweights = [], [], []
        aligned = {}  # (i, j) -> point, for Dirichlet nodes on the grid

        for axis in (0, 1):
            # axis 0: x-couplings, faces halved on bottom/top wall nodes
            # axis 1: y-couplings, faces halved on left/right wall nodes
            anode = a11 if axis == 0 else a22
            frac_mask = on_bt if axis == 0 else on_lr
            frac = np.where(frac_mask[ii, jj], 0.5, 1.0)
            dvec = np.array([h, 0.0]) if axis == 0 else np.array([0.0, h])
            di, dj = (0, 1) if axis == 0 else (1, 0)

            link = {}
            for sgn in (+1, -1):
                if axis == 0:
                    outward = walls["right"] if sgn > 0 else walls["left"]
                else:
                    outward = walls["top"] if sgn > 0 else walls["bottom"]
                ii2, jj2 = ii + sgn * di, jj + sgn * dj
                ingrid = (ii2 >= 0) & (ii2 < ny) & (jj2 >= 0) & (jj2 < nx)
                reg = np.zeros(ii.shape, dtype=bool)
                reg[ingrid] = unknown[ii2[ingrid], jj2[ingrid]]
                theta = np.ones(ii.shape)
                a_opp = np.zeros(ii.shape)
                a_opp[reg] = anode[ii2[reg], jj2[reg]]
                cross = np.zeros((ii.shape[0], 2))
                has = ~(~reg & outward[ii, jj])  # wall behind: no link
                seek = ~reg & has
                if seek.any():
                    p = nodes[ii[seek], jj[seek]] + nudge[ii[seek], jj[seek]]
                    th = _boundary_crossing(domain, p, p + sgn * dvec)
                    th = np.maximum(th, 1e-6)
                    theta[seek] = th
                    cr = (
                        nodes[ii[seek], jj[seek]]
                        + th[:, None] * (sgn * dvec)[None, :]
                    )
                    cross[seek] = cr
                    a_opp[seek] = A(cr)[:, axis, axis]
                if np.any(seek & (np.abs(theta - 1.0) > 1e-9)):
                    symmetric = False
                link[sgn] = dict(
                    regular=reg, theta=theta, a_opp=a_opp, cross=cross, has=has
                )

            a_p = anode[ii, jj]
            th_p = np.where(link[+1]["has"], link[+1]["theta"], 1.0)
            th_m = np.where(link[-1]["has"], link[-1]["theta"], 1.0)
            both = link[+1]["has"] & link[-1]["has"]
            pair_sum = th_p + th_m
            for sgn in (+1, -1):
                L = link[sgn]
                th = np.where(L["has"], L["theta"], 1.0)
                ah = 2.0 * a_p * L["a_opp"] / np.maximum(a_p + L["a_opp"], 1e-300)
                w = ah * frac * np.where(both, 2.0 / (th * pair_sum), 1.0 / th)
                w = np.where(L["has"], w, 0.0)
                reg = L["regular"] & L["has"]
                if reg.any():
                    ii2, jj2 = ii + sgn * di, jj + sgn * dj
                    rows.append(uidx[reg])
                    cols.append(idx[ii2[reg], jj2[reg]])
                    vals.append(w[reg])
                np.add.at(diag, uidx, -w)
                irrd = L["has"] & ~L["regular"]
                if irrd.any():
                    bcrows.append(uidx[irrd])
                    bcpts.append(L["cross"][irrd])
                    bcweights.append(w[irrd])
                    on_node = irrd & (np.abs(L["theta"] - 1.0) < 1e-9)
                    if on_node.any():
                        ii2, jj2 = ii + sgn * di, jj + sgn * dj
                        for a_i, a_j, pt in zip(
                            ii2[on_node], jj2[on_node], L["cross"][on_node]
                        ):
                            aligned[(int(a_i), int(a_j))] = pt

        # complete convex Dirichlet corners: nodes flanked by aligned
        # boundary nodes in both axes get their value from bc directly,
        # which keeps the quadrature cells next to corners usable
        if aligned:
            amask = np.zeros((ny, nx), dtype=bool)
            for (a_i, a_j) in aligned:
                amask[a_i, a_j] = True
            hor = np.zeros_like(amask)
            hor[:, 1:] |= amask[:, :-1]
            hor[:, :-1] |= amask[:, 1:]
            ver = np.zeros_like(amask)
            ver[1:, :] |= amask[:-1, :]
            ver[:-1, :] |= amask[1:, :]
            cand = hor & ver & ~amask & ~unknown
            for c_i, c_j in zip(*np.nonzero(cand)):
                pt = nodes[c_i, c_j]
                if float(domain.boundary_distance(pt[None])[0]) < 1e-9 * h:
                    aligned[(int(c_i), int(c_j))] = pt

        cterm = cvals[ii, jj] * volfrac[ii, jj] * h * h
        rows.append(uidx)
        cols.append(uidx)
        vals.append(diag[uidx] + cterm)
        mat = sp.csr_matrix(
            (
                -np.concatenate(vals),
                (np.concatenate(rows), np.concatenate(cols)),
            ),
            shape=(nunk, nunk),
        )
        mat.sum_duplicates()

        self.h = h
        self.nodes = nodes
        self.unknown = unknown
        self.idx = idx
        self.ii, self.jj, self.uidx = ii, jj, uidx
        self.volfrac = volfrac
        self.on_lr, self.on_bt = on_lr, on_bt
        self.matrix = mat
        self.symmetric = symmetric
        self.bcrows = np.concatenate(bcrows) if bcrows else np.zeros(0, dtype=int)
        self.bcpts = np.concatenate(bcpts) if bcpts else np.zeros((0, 2))
        self.bcweights = np.concatenate(bcweights) if bcweights else np.zeros(0)
        self.aligned_nodes = sorted(aligned.items())
        self._lu = None

    def _rhs(self, src, bc):
        h = self.h
        rhs = np.zeros(self.matrix.shape[0])
        upts = self.nodes[self.ii, self.jj]
        vol = self.volfrac[self.ii, self.jj] * h * h
        rhs[self.uidx] = -src.f_at(upts) * vol
        if src.F is not None:
            for axis in (0, 1):
                frac_mask = self.on_bt if axis == 0 else self.on_lr
                frac = np.where(frac_mask[self.ii, self.jj], 0.5, 1.0)
                dvec = np.array([h, 0.0]) if axis == 0 else np.array([0.0, h])
                for sgn in (+1, -1):
                    mids = upts + 0.5 * sgn * dvec
                    comp = src.F_at(mids)[:, axis]
                    np.add.at(rhs, self.uidx, -sgn * comp * h * frac)
        if self.bcrows.size:
            gvals = np.asarray(bc(self.bcpts), dtype=float)
            np.add.at(rhs, self.bcrows, self.bcweights * gvals)
        return rhs

    def solve(self, src=NO_SOURCE, bc=None):
        if bc is None:
            bc = lambda pts: np.zeros(pts.shape[:-1])  # noqa: E731
        b = self._rhs(src, bc)
        if self.symmetric:
            sol, iters, res = _pcg(self.matrix, b)
        else:
            if self._lu is None:
                self._lu = spla.splu(self.matrix.tocsc())
            sol = self._lu.solve(b)
            iters = 0
            bn = float(np.linalg.norm(b))
            res = float(np.linalg.norm(self.matrix @ sol - b)) / max(bn, 1e-300)
        values = np.full((self.grid.ny, self.grid.nx), np.nan)
        values[self.unknown] = sol[self.idx[self.unknown]]
        active = self.unknown.copy()
        if self.aligned_nodes:
            pts = np.array([p for _, p in self.aligned_nodes])
            gv = np.asarray(bc(pts), dtype=float)
            for ((a_i, a_j), _), val in zip(self.aligned_nodes, gv):
                values[a_i, a_j] = val
                active[a_i, a_j] = True
        return DiscreteSolution(
            grid=self.grid,
            values=values,
            active=active,
            unknown=self.unknown,
            residual=res,
            iterations=iters,
            symmetric=self.symmetric,
            meta={"n_unknowns": int(self.matrix.shape[0])},
        )

    def reactions(self, solution, src=NO_SOURCE, c=0.0):
        """Discrete co-normal flux functional at on-grid Dirichlet nodes.

        For a boundary node b with nodal hat phi_b,

            R_b ~ int (A grad u . nu) phi_b ds
                = -sum_q w_bq (u_q - u_b) + (f_b - c_b u_b) h^2 / 2 + F-terms,

        where edges running along the boundary carry half weight (their flux
        face is half a cell). Dividing by h gives the flux density at b.
        Returns (points, values) ordered by grid index.
        """
        h = self.h
        v = solution.values
        ny, nx = self.grid.ny, self.grid.nx
        nodes = self.nodes
        out_pts, out_vals = [], []
        for (b_i, b_j), pt in self.aligned_nodes:
            acc = 0.0
            for di, dj, axis in ((0, 1, 0), (0, -1, 0), (1, 0, 1), (-1, 0, 1)):
                i2, j2 = b_i + di, b_j + dj
                if not (0 <= i2 < ny and 0 <= j2 < nx):
                    continue
                if not solution.active[i2, j2]:
                    continue
                a_b = self.A(nodes[b_i, b_j])[axis, axis]
                a_q = self.A(nodes[i2, j2])[axis, axis]
                w = 2.0 * a_b * a_q / (a_b + a_q)
                if not self.unknown[i2, j2]:
                    w *= 0.5  # edge runs along the boundary
                acc -= w * (v[i2, j2] - v[b_i, b_j])
            cb = c(nodes[b_i, b_j][None])[0] if callable(c) else float(c)
            acc += (src.f_at(nodes[b_i, b_j][None])[0] - cb * v[b_i, b_j]) * (
                h * h / 2.0
            )
            if src.F is not None:
                for di, dj, axis in ((0, 1, 0), (0, -1, 0), (1, 0, 1), (-1, 0, 1)):
                    i2, j2 = b_i + di, b_j + dj
                    inb = 0 <= i2 < ny and 0 <= j2 < nx and solution.active[i2, j2]
                    fr = 1.0 if (inb and self.unknown[i2, j2]) else 0.5
                    mid = nodes[b_i, b_j] + 0.5 * np.array([dj * h, di * h])
                    acc += (di + dj) * src.F_at(mid[None])[0, axis] * h * fr
            out_pts.append(pt)
            out_vals.append(acc)
        return np.asarray(out_pts), np.asarray(out_vals)


def solve_dirichlet(
    domain,
    A,
    c,
    src,
    bc,
    grid=None,
    n=256,
    neumann_sides=(),
):
    """One-shot solve; see :class:`DirichletSystem` for the discretization."""
    return DirichletSystem(
        domain, A, c=c, grid=grid, n=n, neumann_sides=neumann_sides
    ).solve(src=src, bc=bc)


def discrete_residual(values, grid, A, c=0.0, src=NO_SOURCE, mask=None):
    """RMS residual of the interior stencil applied to a grid function.

    Uses the solver's harmonic-mean flux stencil descaled by h^2, so the
    result lives on the scale of f. Only nodes whose four neighbors hold
    finite values are evaluated; ``mask`` restricts further.
    """
    v = np.asarray(values, dtype=float)
    h = grid.h
    nodes = grid.nodes()
    amat = A(nodes)
    a11, a22 = amat[..., 0, 0], amat[..., 1, 1]
    cvals = (
        np.asarray(c(nodes), dtype=float)
        if callable(c)
        else np.full(v.shape, float(c))
    )
    ok = np.isfinite(v)
    core = np.zeros_like(ok)
    core[1:-1, 1:-1] = (
        ok[1:-1, 1:-1]
        & ok[1:-1, 2:]
        & ok[1:-1, :-2]
        & ok[2:, 1:-1]
        & ok[:-2, 1:-1]
    )
    if mask is not None:
        core &= mask
    hm = lambda a, b: 2 * a * b / (a + b)  # noqa: E731
    vv = np.where(ok, v, 0.0)
    r = np.zeros_like(vv)
    aE = hm(a11[1:-1, 1:-1], a11[1:-1, 2:])
    aW = hm(a11[1:-1, 1:-1], a11[1:-1, :-2])
    aN = hm(a22[1:-1, 1:-1], a22[2:, 1:-1])
    aS = hm(a22[1:-1, 1:-1], a22[:-2, 1:-1])
    r[1:-1, 1:-1] = (
        aE * (vv[1:-1, 2:] - vv[1:-1, 1:-1])
        + aW * (vv[1:-1, :-2] - vv[1:-1, 1:-1])
        + aN * (vv[2:, 1:-1] - vv[1:-1, 1:-1])
        + aS * (vv[:-2, 1:-1] - vv[1:-1, 1:-1])
    ) / (h * h) + cvals[1:-1, 1:-1] * vv[1:-1, 1:-1]
    rhs = src.f_at(nodes)
    if src.F is not None:
        Fx = (
            src.F_at(nodes + np.array([h / 2, 0]))[..., 0]
            - src.F_at(nodes - np.array([h / 2, 0]))[..., 0]
        )
        Fy = (
            src.F_at(nodes + np.array([0, h / 2]))[..., 1]
            - src.F_at(nodes - np.array([0, h / 2]))[..., 1]
        )
        rhs = rhs + (Fx + Fy) / h
    resid = np.where(core, r - rhs, 0.0)
    nc = max(int(core.sum()), 1)
    return float(np.sqrt(np.sum(resid**2) / nc))


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def _cell_region_mask(sol, region):
    cells = sol.valid_cells()
    if region is None:
        return cells
    centers = sol.grid.cell_centers()
    if hasattr(region, "contains_points"):
        inside = region.contains_points(centers)
    elif hasattr(region, "contains"):
        inside = region.contains(centers)
    else:
        inside = np.asarray(region(centers), dtype=bool)
    return cells & inside


def norm_l2(sol, rho0=1.0, region=None):
    """rho0-normalized L2 norm by midpoint quadrature on valid cells."""
    m = _cell_region_mask(sol, region)
    u = sol.cell_means()
    h = sol.grid.h
    return float(np.sqrt(np.sum(u[m] ** 2) * h * h)) / rho0


def norm_h1(sol, rho0=1.0, region=None):
    m = _cell_region_mask(sol, region)
    u = sol.cell_means()
    gx, gy = sol.cell_gradients()
    h = sol.grid.h
    val = (np.sum(u[m] ** 2) + rho0**2 * np.sum(gx[m] ** 2 + gy[m] ** 2)) * h * h
    return float(np.sqrt(val)) / rho0


def l2_on_ball(sol, center, r, rho0=1.0):
    """L2 norm over a disc, midpoint rule on cells with centers inside."""
    centers = sol.grid.cell_centers()
    d2 = (centers[..., 0] - center[0]) ** 2 + (centers[..., 1] - center[1]) ** 2
    m = sol.valid_cells() & (d2 < r * r)
    u = sol.cell_means()
    h = sol.grid.h
    return float(np.sqrt(np.sum(u[m] ** 2) * h * h)) / rho0


# ---------------------------------------------------------------------------
# trace norms
# ---------------------------------------------------------------------------

_MAX_TRACE_NODES = 2048


def _trace_basis(m, length):
    """Eigenpairs of the 1-d Dirichlet Laplacian on m interior arc nodes."""
    if m > _MAX_TRACE_NODES:
        raise PDEError(f"trace norm limited to {_MAX_TRACE_NODES} boundary nodes")
    ds = length / (m + 1)
    T = (
        np.diag(np.full(m, 2.0))
        + np.diag(np.full(m - 1, -1.0), 1)
        + np.diag(np.full(m - 1, -1.0), -1)
    ) / ds**2
    lam, vec = np.linalg.eigh(T)
    vec = vec / math.sqrt(ds)  # orthonormal for the ds-weighted inner product
    return lam, vec, ds


def trace_norm(samples, length, order, rho0=1.0):
    """Fractional boundary norm of data sampled at m interior arc nodes.

    ``samples[j]`` is the value at arclength (j+1) * length / (m+1);
    ``order`` is +0.5 for Dirichlet traces, -0.5 for Neumann traces.
    """
    g = np.asarray(samples, dtype=float)
    if g.ndim != 1 or g.size < 4:
        raise PDEError("trace data needs at least 4 interior boundary samples")
    if order not in (0.5, -0.5):
        raise PDEError("order must be +0.5 or -0.5")
    lam, vec, ds = _trace_basis(g.size, length)
    coeff = ds * (vec.T @ g)
    w = (1.0 + rho0**2 * lam) ** order
    return float(math.sqrt(np.sum(w * coeff**2) / rho0))


def trace_duality_gap(g, psi, length, rho0=1.0):
    """|<g, psi>| / (||g||_{1/2} ||psi||_{-1/2}), always <= 1."""
    g = np.asarray(g, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if g.shape != psi.shape:
        raise PDEError("paired trace data must share the sample grid")
    ds = length / (g.size + 1)
    pairing = float(np.sum(g * psi) * ds) / rho0
    denom = trace_norm(g, length, 0.5, rho0) * trace_norm(psi, length, -0.5, rho0)
    if denom == 0.0:
        return 0.0
    return abs(pairing) / denom


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def solution_to_csv(sol, path):
    """Write active nodes as ``x,y,value`` rows (row-major, deterministic)."""
    g = sol.grid
    lines = ["x,y,value"]
    xs, ys = g.xs(), g.ys()
    act = sol.active
    for i in range(g.ny):
        for j in range(g.nx):
            if act[i, j]:
                lines.append(f"{xs[j]!r},{ys[i]!r},{sol.values[i, j]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
