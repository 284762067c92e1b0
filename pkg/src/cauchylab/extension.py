"""Cauchy-data extension across a boundary window.

Given a solution with Cauchy data (g, psi) on a Lipschitz boundary window,
this module glues a pocket onto the domain below the window and produces an
extended function solving an inhomogeneous equation there, so boundary data
become interior information near an anchor ball:

* a piecewise-linear bump and the lowered graph it carves below the window,
* the augmented domain (original domain plus the carved pocket) with its
  Lipschitz bookkeeping and a cone-tangent anchor ball inside the pocket,
* a minimum-energy extension of the Dirichlet data into the glued strip,
* a Riesz representation turning the Neumann pairing into a volume pair
  (f1, F1) on the glued region,
* the assembled extended solution with modified sources (f~, F~) and a
  discrete weak-residual verification.

Solves and quadratures share the five-point conventions of the pde module;
with the Neumann data harvested from the discrete co-normal reactions the
weak identities close at solver precision (interface rows take the mean of
the one-sided limits). With a vector source F near the window the interface
quadrature carries an O(spacing) defect, added to the residual tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    GeometryError,
    GridMask,
    Polygon,
    Rectangle,
    rho_of_point,
    verify_lipschitz_graph,
)
from .pde import (
    DiscreteSolution,
    NO_SOURCE,
    RectGrid,
    SourceData,
    _pcg,
    identity_coefficient,
    norm_h1,
    solve_dirichlet,
    trace_norm,
)
from .smallness import source_smallness

__all__ = [
    "ExtensionError",
    "bump",
    "lowered_graph",
    "AugmentedDomain",
    "augment",
    "extend_cauchy_data",
    "RieszPair",
    "riesz_source",
    "harvest_cauchy_data",
    "ExtendedSolution",
    "extended_equation",
    "augmented_target",
    "augmented_to_text",
    "augmented_from_text",
    "extension_report_csv",
]


class ExtensionError(RuntimeError):
    """Extension construction or consistency failure."""


# ---------------------------------------------------------------------------
# bump and lowered graph
# ---------------------------------------------------------------------------


def bump(t):
    """Piecewise-linear cutoff: 1 on [0, 1/4], ramp to 0 on [1/4, 1/2]."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise ValueError("bump argument must be nonnegative")
    out = np.clip(4.0 * (0.5 - arr), 0.0, 1.0)
    return float(out) if np.isscalar(t) else out


def lowered_graph(xs, z, rho1, M0, rho0):
    """Carve the window graph down by (rho1/2) * bump(M0 |x'| / rho1).

    The input graph must satisfy the (rho0, M0) Lipschitz bounds; the output
    is checked against the 7/2 rho0 M0 budget for its C^{0,1} norm.
    """
    xs = np.asarray(xs, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (rho1 > 0 and rho0 > 0 and M0 >= 1):
        raise GeometryError("lowered graph needs rho1, rho0 > 0 and M0 >= 1")
    if rho1 > rho0 * (1 + 1e-12):
        raise GeometryError("window size rho1 cannot exceed the scale rho0")
    if not verify_lipschitz_graph(xs, z, rho0, M0):
        raise GeometryError("graph violates the (rho0, M0) Lipschitz bounds")
    zm = z - 0.5 * rho1 * bump(M0 * np.abs(xs) / rho1)
    slopes = np.diff(zm) / np.diff(xs)
    norm = np.abs(zm).max() + rho0 * np.abs(slopes).max()
    if norm > 3.5 * rho0 * M0 * (1 + 1e-9):
        raise ExtensionError(
            f"lowered graph C^0,1 norm {norm} exceeds 7/2 rho0 M0"
        )
    return zm


# ---------------------------------------------------------------------------
# augmented domain
# ---------------------------------------------------------------------------


def _frame_from_portion(portion, P):
    """Tangent and inward normal of the window at P (unit, right-handed)."""
    sigma = portion.sigma
    a, b = sigma[:-1], sigma[1:]
    ab = b - a
    ab2 = np.maximum(np.sum(ab**2, axis=1), 1e-300)
    tpar = np.clip(np.sum((P - a) * ab, axis=1) / ab2, 0.0, 1.0)
    proj = a + tpar[:, None] * ab
    k = int(np.argmin(np.linalg.norm(proj - P, axis=1)))
    tvec = ab[k] / math.sqrt(ab2[k])
    nvec = np.array([-tvec[1], tvec[0]])
    for delta in (1e-6, 1e-4, 1e-2):
        d = delta * portion.rho0
        plus = bool(portion.domain.contains((P + d * nvec)[None])[0])
        minus = bool(portion.domain.contains((P - d * nvec)[None])[0])
        if plus != minus:
            if minus:
                nvec = -nvec
            # tangent re-derived from the normal keeps the frame right-handed
            return np.array([nvec[1], -nvec[0]]), nvec
    raise GeometryError("cannot orient the window normal at P")


def _window_graph(portion, P, tvec, nvec, xs):
    """Window polyline resampled as a graph over the tangent axis."""
    rel = portion.sigma - P
    ts = rel @ tvec
    zs = rel @ nvec
    order = np.argsort(ts, kind="stable")
    ts, zs = ts[order], zs[order]
    pad = 1e-9 * (xs[-1] - xs[0])
    if ts[0] > xs[0] + pad or ts[-1] < xs[-1] - pad:
        raise GeometryError(
            "window polyline does not cover the rho0/M0 graph cylinder"
        )
    return np.interp(xs, ts, zs)


@dataclass
class AugmentedDomain:
    """Domain with a pocket carved below a boundary window.

    All pocket geometry lives in local coordinates at P: x' along the
    tangent, x_n along the inward normal, so the window is the graph
    x_n = Z(x') and the pocket sits between the lowered graph and Z.
    """

    omega: object
    P: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    rho0: float
    M0: float
    rho1: float
    xs: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    z_minus: np.ndarray = field(repr=False)
    r0: float = 0.0
    x0_local: np.ndarray = None
    portion: object = field(default=None, repr=False)
    checks: dict = field(default_factory=dict)

    def to_local(self, pts):
        pts = np.asarray(pts, dtype=float)
        rel = pts - self.P
        return np.stack([rel @ self.tangent, rel @ self.normal], axis=-1)

    def to_world(self, pts):
        pts = np.asarray(pts, dtype=float)
        return (
            self.P
            + pts[..., :1] * self.tangent
            + pts[..., 1:] * self.normal
        )

    @property
    def x0(self):
        """Anchor ball center in world coordinates."""
        return self.to_world(self.x0_local)

    def graph_at(self, x):
        return np.interp(x, self.xs, self.z)

    def lowered_at(self, x):
        return np.interp(x, self.xs, self.z_minus)

    def pocket_contains_local(self, pts):
        """Membership in the carved pocket, local coordinates."""
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        w0 = 0.5 * self.rho1 / self.M0
        return (
            (np.abs(x) < w0)
            & (y > self.lowered_at(x))
            & (y < self.graph_at(x))
        )

    def contains(self, pts):
        """Membership in the augmented domain (window itself has measure 0)."""
        pts = np.asarray(pts, dtype=float)
        return self.omega.contains(pts) | self.pocket_contains_local(
            self.to_local(pts)
        )

    def axis_aligned(self, tol=1e-12):
        t = self.tangent
        return min(abs(abs(t[0]) - 1.0), abs(abs(t[1]) - 1.0)) < tol

    def flat_window(self, tol_factor=1e-9):
        return float(np.abs(self.z).max()) <= tol_factor * self.rho0

    def omega_tilde(self):
        """Augmented domain as a polygon (straight windows on rectangles)."""
        w0 = 0.5 * self.rho1 / self.M0
        sel = np.abs(self.xs) < w0 * (1 - 1e-12)
        inner = np.column_stack([self.xs[sel], self.z_minus[sel]])
        # pocket mouth closes exactly at +-w0; keep those endpoints exact
        chain = np.vstack([(-w0, 0.0), inner, (w0, 0.0)])
        return _splice_into_rectangle(self, chain)


def _splice_into_rectangle(aug, chain_local):
    """Insert a local-coordinate chain into the boundary edge holding P."""
    omega = aug.omega
    if not isinstance(omega, Rectangle):
        raise ExtensionError(
            "boundary splicing is implemented for rectangle domains only"
        )
    if not aug.flat_window():
        raise ExtensionError("boundary splicing needs a straight window")
    w, h = omega.width, omega.height
    corners = np.array([(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)])
    world = aug.to_world(chain_local)
    verts = []
    placed = False
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        verts.append(tuple(a))
        seg = b - a
        seg2 = float(seg @ seg)
        t = float(np.clip((aug.P - a) @ seg / seg2, 0.0, 1.0))
        if not placed and np.linalg.norm(a + t * seg - aug.P) < 1e-9 * max(w, h):
            for p in world:
                if min(np.linalg.norm(p - a), np.linalg.norm(p - b)) > 1e-12:
                    verts.append((float(p[0]), float(p[1])))
            placed = True
    if not placed:
        raise ExtensionError("P does not sit on an edge of the rectangle")
    return Polygon(tuple(verts))


def augment(omega, portion, P=None, n_graph=513, n_check=10000, seed=0):
    """Carve the pocket below the window at P and certify its geometry.

    Runs sampled checks of the augmented domain's properties: per-patch
    Lipschitz bounds (rho0/2, 7 M0/2) of the lowered boundary, the small
    cylinder and cone containments, and the anchor-ball tangency. Any
    failure raises; results are recorded in ``checks``.
    """
    P = np.asarray(portion.P if P is None else P, dtype=float).reshape(2)
    if portion.rho1 is None:
        raise GeometryError("portion carries no window size rho1")
    rho0, M0, rho1 = portion.rho0, portion.M0, float(portion.rho1)
    lim = rho_of_point(portion, P)
    if rho1 > lim * (1 + 1e-9):
        raise GeometryError(f"rho1 = {rho1} exceeds rho(P) = {lim}")
    tvec, nvec = _frame_from_portion(portion, P)
    a = rho0 / M0
    xs = np.linspace(-a, a, n_graph)
    z = _window_graph(portion, P, tvec, nvec, xs)
    zm = lowered_graph(xs, z, rho1, M0, rho0)
    r0 = rho1 / (8.0 * (math.sqrt(1.0 + M0**2) + 1.0))
    aug = AugmentedDomain(
        omega=omega,
        P=P,
        tangent=tvec,
        normal=nvec,
        rho0=rho0,
        M0=M0,
        rho1=rho1,
        xs=xs,
        z=z,
        z_minus=zm,
        r0=r0,
        x0_local=np.array([0.0, r0 - rho1 / 8.0]),
        portion=portion,
    )
    _certify(aug, n_check, seed)
    return aug


def _certify(aug, n_check, seed):
    rng = np.random.default_rng(seed)
    rho1, M0, rho0 = aug.rho1, aug.M0, aug.rho0
    checks = {}

    # per-patch Lipschitz windows of the lowered boundary
    w0 = 0.5 * rho1 / M0
    half = (rho0 / 2.0) / (3.5 * M0)
    ok = True
    for xc in np.linspace(-w0, w0, 33):
        sel = np.abs(aug.xs - xc) <= half
        if sel.sum() < 2:
            continue
        ok = ok and verify_lipschitz_graph(
            aug.xs[sel] - xc,
            aug.z_minus[sel] - aug.lowered_at(xc),
            rho0 / 2.0,
            3.5 * M0,
        )
    checks["lipschitz_patches"] = bool(ok)

    # small cylinder inside the augmented domain
    cyl = np.column_stack(
        [
            rng.uniform(-rho1 / (4 * M0), rho1 / (4 * M0), n_check),
            rng.uniform(-rho1 / 4, rho1 / 4, n_check),
        ]
    )
    inside = aug.omega.contains(aug.to_world(cyl)) | aug.pocket_contains_local(
        cyl
    )
    checks["cylinder_in_domain"] = bool(inside.all())

    # cone below the window inside the pocket
    cx = rng.uniform(-rho1 / (4 * M0), rho1 / (4 * M0), n_check)
    depth = rho1 / 4 - M0 * np.abs(cx)
    cy = -M0 * np.abs(cx) - rng.uniform(0.0, 1.0, n_check) * depth
    checks["cone_in_pocket"] = bool(
        aug.pocket_contains_local(np.column_stack([cx, cy])).all()
    )

    # anchor ball inside the rho1/8 cone, with exact side/bottom tangency
    r0, (xb, yb) = aug.r0, aug.x0_local
    th = rng.uniform(0.0, 2 * math.pi, n_check)
    rr = r0 * (1 - 1e-9) * np.sqrt(rng.uniform(0.0, 1.0, n_check))
    bx, by = xb + rr * np.cos(th), yb + rr * np.sin(th)
    in_cone = (by > -rho1 / 8) & (by < -M0 * np.abs(bx))
    checks["ball_in_cone"] = bool(in_cone.all())
    side = abs(M0 * xb + yb) / math.sqrt(1 + M0**2)
    bottom = rho1 / 8 + yb
    checks["ball_tangency"] = bool(
        abs(side - r0) < 1e-12 * rho1 and abs(bottom - r0) < 1e-12 * rho1
    )

    # half ball inside pocket and the rho1/8 cylinder
    rr = 0.5 * r0 * (1 - 1e-9) * np.sqrt(rng.uniform(0.0, 1.0, n_check))
    hx, hy = xb + rr * np.cos(th), yb + rr * np.sin(th)
    half_pts = np.column_stack([hx, hy])
    in_cyl = (np.abs(hx) < rho1 / (8 * M0)) & (np.abs(hy) < rho1 / 8)
    checks["half_ball_anchored"] = bool(
        (aug.pocket_contains_local(half_pts) & in_cyl).all()
    )

    aug.checks = checks
    bad = [k for k, v in checks.items() if not v]
    if bad:
        raise ExtensionError(f"augmented-domain checks failed: {bad}")


# ---------------------------------------------------------------------------
# glued strip dimensions (grid-snapped)
# ---------------------------------------------------------------------------


def _snapped_strip(aug, spacing, depth=None):
    """Half-width and depth of the glued strip in whole grid cells."""
    depth = aug.rho1 if depth is None else float(depth)
    if not 0 < depth <= aug.rho1 * (1 + 1e-12):
        raise GeometryError("strip depth must lie in (0, rho1]")
    ka = int(math.floor((aug.rho1 / aug.M0) / spacing + 1e-9))
    kd = int(math.floor(depth / spacing + 1e-9))
    if ka < 2 or kd < 2:
        raise GeometryError(
            f"glued region is empty at spacing {spacing} (needs 2 cells)"
        )
    return ka, kd


# ---------------------------------------------------------------------------
# Dirichlet-data extension into the strip
# ---------------------------------------------------------------------------


def extend_cauchy_data(g, aug, spacing, depth=None):
    """Minimum-energy extension of the window data into the glued strip.

    Solves the Laplace equation below the window with the data on the graph
    side and natural (zero-flux) values on the other sides, so constants
    extend exactly. ``g`` is a callable on world points or an array of node
    values along the window (one per grid column, endpoints included). The
    solution lives in local coordinates; ``meta`` records the measured
    extension constant |v|_H1 / |g|_H1/2.
    """
    sp = float(spacing)
    ka, kd = _snapped_strip(aug, sp, depth)
    a_s, d_s = ka * sp, kd * sp
    flat = aug.flat_window()
    if flat:
        region = Polygon(((-a_s, -d_s), (a_s, -d_s), (a_s, 0.0), (-a_s, 0.0)))
        ny = kd + 1
        length = 2.0 * a_s
    else:
        sel = np.abs(aug.xs) < a_s * (1 - 1e-12)
        gx = np.concatenate([[-a_s], aug.xs[sel], [a_s]])
        gz = np.concatenate(
            [[float(aug.graph_at(-a_s))], aug.z[sel], [float(aug.graph_at(a_s))]]
        )
        if gz.min() <= -d_s + sp:
            raise ExtensionError("strip depth collides with the window graph")
        verts = [(-a_s, -d_s), (a_s, -d_s)]
        verts += [(float(x), float(y)) for x, y in zip(gx[::-1], gz[::-1])]
        region = Polygon(tuple(verts))
        ny = kd + 1 + int(math.ceil(max(gz.max(), 0.0) / sp + 1.0))
        length = float(np.sum(np.hypot(np.diff(gx), np.diff(gz))))
    grid = RectGrid(-a_s, -d_s, sp, 2 * ka + 1, ny)

    if callable(g):
        bc = lambda pts: np.asarray(  # noqa: E731
            g(aug.to_world(pts)), dtype=float
        )
    else:
        gvals = np.asarray(g, dtype=float)
        if gvals.shape != (2 * ka + 1,):
            raise ExtensionError(
                f"window data needs {2 * ka + 1} node values, got {gvals.shape}"
            )
        if not flat:
            raise ExtensionError("sampled window data needs a straight window")

        def bc(pts):
            j = np.rint((pts[..., 0] + a_s) / sp).astype(int)
            return gvals[np.clip(j, 0, 2 * ka)]

    sol = solve_dirichlet(
        region,
        identity_coefficient(),
        0.0,
        NO_SOURCE,
        bc,
        grid=grid,
        neumann_sides=("left", "right", "bottom"),
    )
    tx = -a_s + sp * (np.arange(2 * ka - 1) + 1)
    tsamples = bc(np.column_stack([tx, aug.graph_at(tx)]))
    tr = (
        trace_norm(tsamples, length, 0.5, aug.rho0)
        if tsamples.size >= 4 and np.any(tsamples)
        else 0.0
    )
    ratio = norm_h1(sol, aug.rho0) / tr if tr > 0 else 0.0
    sol.meta.update(
        {
            "strip_cells": (ka, kd),
            "window_length": length,
            "trace_half_norm": tr,
            "extension_constant": ratio,
        }
    )
    return sol


# ---------------------------------------------------------------------------
# Riesz representation of the Neumann pairing
# ---------------------------------------------------------------------------


def _union_grid(aug, a_s, d_s, sp):
    """Grid covering the domain box together with the glued strip."""
    x0b, y0b, x1b, y1b = aug.omega.bounding_box()
    corners = aug.to_world(
        np.array([(-a_s, 0.0), (a_s, 0.0), (-a_s, -d_s), (a_s, -d_s)])
    )
    x0g = min(x0b, corners[:, 0].min())
    y0g = min(y0b, corners[:, 1].min())
    x1g = max(x1b, corners[:, 0].max())
    y1g = max(y1b, corners[:, 1].max())
    for v in (x1g - x0g, y1g - y0g, x0g - x0b, y0g - y0b):
        if abs(v / sp - round(v / sp)) > 1e-9:
            raise ExtensionError(
                "glued-region grid needs sides commensurable with the spacing"
            )
    nx = int(round((x1g - x0g) / sp)) + 1
    ny = int(round((y1g - y0g) / sp)) + 1
    return RectGrid(x0g, y0g, sp, nx, ny)


def _riesz_masks(aug, grid, ka, kd):
    """Interior and closure node masks of the glued region, by arithmetic.

    Polygon membership tests are unreliable exactly on grid-aligned
    boundary segments, so the masks come from the rectangle inequalities
    and the local strip inequalities directly.
    """
    if not isinstance(aug.omega, Rectangle):
        raise ExtensionError(
            "the glued-region solve is implemented for rectangle domains only"
        )
    sp = grid.h
    a_s, d_s = ka * sp, kd * sp
    nodes = grid.nodes()
    loc = aug.to_local(nodes)
    lx, ly = loc[..., 0], loc[..., 1]
    t = 1e-9 * sp
    strip_closed = (np.abs(lx) <= a_s + t) & (ly >= -d_s - t) & (ly <= t)
    strip_open = (np.abs(lx) < a_s - t) & (ly > -d_s + t) & (ly < -t)
    window = (np.abs(lx) < a_s - t) & (np.abs(ly) < t)
    x, y = nodes[..., 0], nodes[..., 1]
    w, h = aug.omega.width, aug.omega.height
    closed_rect = (x >= -t) & (x <= w + t) & (y >= -t) & (y <= h + t)
    unk = aug.omega.contains(nodes) | strip_open | window
    act = closed_rect | strip_closed
    return unk, act


def _riesz_matrix(unk, act, rho0, sp):
    """Uniform five-point form: rho0^2 sum (d.)^2 + h^2 sum (.)^2."""
    import scipy.sparse as sprs

    ny, nx = unk.shape
    idx = -np.ones((ny, nx), dtype=np.int64)
    nunk = int(unk.sum())
    idx[unk] = np.arange(nunk)
    II, JJ = np.nonzero(unk)
    r2 = rho0**2
    diag = np.full(nunk, sp * sp)
    rows, cols, vals = [], [], []
    for di, dj in ((0, 1), (1, 0)):
        for sgn in (+1, -1):
            i2, j2 = II + sgn * di, JJ + sgn * dj
            ing = (i2 >= 0) & (i2 < ny) & (j2 >= 0) & (j2 < nx)
            nb_act = np.zeros(II.shape, dtype=bool)
            nb_act[ing] = act[i2[ing], j2[ing]]
            if not nb_act.all():
                raise ExtensionError(
                    "glued-region closure does not cover interior neighbors"
                )
            diag += r2
            nb_unk = np.zeros(II.shape, dtype=bool)
            nb_unk[ing] = unk[i2[ing], j2[ing]]
            rows.append(idx[II[nb_unk], JJ[nb_unk]])
            cols.append(idx[i2[nb_unk], j2[nb_unk]])
            vals.append(np.full(int(nb_unk.sum()), -r2))
    rows.append(idx[II, JJ])
    cols.append(idx[II, JJ])
    vals.append(diag)
    mat = sprs.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nunk, nunk),
    )
    mat.sum_duplicates()
    return mat, idx


def _window_nodes(aug, grid, ka):
    """Grid indices and world points of the window interior nodes."""
    m = 2 * ka - 1
    loc = np.column_stack(
        [-ka * grid.h + grid.h * (np.arange(m) + 1), np.zeros(m)]
    )
    world = aug.to_world(loc)
    jj = np.rint((world[:, 0] - grid.x0) / grid.h).astype(int)
    ii = np.rint((world[:, 1] - grid.y0) / grid.h).astype(int)
    drift = np.hypot(
        world[:, 0] - (grid.x0 + jj * grid.h),
        world[:, 1] - (grid.y0 + ii * grid.h),
    )
    if drift.max() > 1e-9 * grid.h:
        raise ExtensionError("window nodes do not sit on the solve grid")
    return ii, jj, world


@dataclass
class RieszPair:
    """Volume pair (f1, F1) reproducing the window pairing on test functions.

    ``pair`` evaluates sum f1 phi - F1 . grad phi with the nodal/edge
    quadratures matched to the five-point solver, so it reproduces
    ``sigma_pair`` (the window line quadrature) up to solver residual.
    """

    w: DiscreteSolution
    f1: np.ndarray = field(repr=False)
    F1x: np.ndarray = field(repr=False)
    F1y: np.ndarray = field(repr=False)
    window_ii: np.ndarray = field(repr=False)
    window_jj: np.ndarray = field(repr=False)
    window_pts: np.ndarray = field(repr=False)
    psi_line: np.ndarray = field(repr=False)
    rho0: float = 1.0
    constants: dict = field(default_factory=dict)

    def pair(self, phi):
        h = self.w.grid.h
        mass = float(np.sum(self.f1 * phi)) * h * h
        flux = float(
            np.sum(self.F1x * np.diff(phi, axis=1))
            + np.sum(self.F1y * np.diff(phi, axis=0))
        ) * h
        return mass - flux

    def sigma_pair(self, phi):
        return float(np.sum(self.psi_line * phi[self.window_ii, self.window_jj]))

    def norms(self):
        h = self.w.grid.h
        nf = math.sqrt(float(np.sum(self.f1**2)) * h * h) / self.rho0
        nF = (
            math.sqrt(float(np.sum(self.F1x**2) + np.sum(self.F1y**2)) * h * h)
            / self.rho0
        )
        return nf, nF


def riesz_source(psi, aug, spacing, depth=None):
    """Represent the window pairing as a volume pair on the glued region.

    Solves the weighted scalar-product problem (mass plus rho0^2 gradient,
    as in the package norms) with the window line functional as the
    right-hand side, then sets f1 = w / rho0^2 and F1 = -grad w on edges.
    ``psi`` is a callable flux density on world points, or an array of line
    values (already length-weighted) at the window interior nodes.
    """
    sp = float(spacing)
    if not (aug.axis_aligned() and aug.flat_window()):
        raise ExtensionError(
            "the glued-region solve needs a straight, grid-aligned window"
        )
    ka, kd = _snapped_strip(aug, sp, depth)
    a_s, d_s = ka * sp, kd * sp
    grid = _union_grid(aug, a_s, d_s, sp)
    rho0 = aug.rho0
    unk, act = _riesz_masks(aug, grid, ka, kd)
    mat, idx = _riesz_matrix(unk, act, rho0, sp)
    ii, jj, wpts = _window_nodes(aug, grid, ka)
    if callable(psi):
        psi_line = np.asarray(psi(wpts), dtype=float) * sp
    else:
        psi_line = np.asarray(psi, dtype=float)
        if psi_line.shape != ii.shape:
            raise ExtensionError(
                f"window flux needs {ii.size} line values, got {psi_line.shape}"
            )
    rows = idx[ii, jj]
    if np.any(rows < 0):
        raise ExtensionError("window interior nodes are not interior unknowns")
    rhs = np.zeros(mat.shape[0])
    rhs[rows] = rho0**2 * psi_line
    wvec, iters, res = _pcg(mat, rhs)
    values = np.full((grid.ny, grid.nx), np.nan)
    values[unk] = wvec[idx[unk]]
    values[act & ~unk] = 0.0
    w_sol = DiscreteSolution(
        grid=grid,
        values=values,
        active=act,
        unknown=unk,
        residual=res,
        iterations=iters,
        symmetric=True,
        meta={"n_unknowns": int(mat.shape[0])},
    )
    active = act
    vals = np.where(active, np.nan_to_num(values), 0.0)
    f1 = vals / rho0**2
    both_x = active[:, 1:] & active[:, :-1]
    both_y = active[1:, :] & active[:-1, :]
    F1x = np.where(both_x, -(vals[:, 1:] - vals[:, :-1]) / sp, 0.0)
    F1y = np.where(both_y, -(vals[1:, :] - vals[:-1, :]) / sp, 0.0)
    pair = RieszPair(
        w=w_sol,
        f1=f1,
        F1x=F1x,
        F1y=F1y,
        window_ii=ii,
        window_jj=jj,
        window_pts=wpts,
        psi_line=psi_line,
        rho0=rho0,
    )
    nf, nF = pair.norms()
    eta_psi = (
        rho0 * trace_norm(psi_line / sp, 2 * a_s, -0.5, rho0)
        if psi_line.size >= 4 and np.any(psi_line)
        else 0.0
    )
    pair.constants = {
        "eta_psi": eta_psi,
        "f1_norm": nf,
        "F1_norm": nF,
        "f1est_constant": (rho0 * nf + nF) * rho0 / eta_psi if eta_psi else 0.0,
        "solver_residual": res,
    }
    return pair


# ---------------------------------------------------------------------------
# harvesting discrete Cauchy data
# ---------------------------------------------------------------------------


def harvest_cauchy_data(u, system, aug, src=NO_SOURCE, c=0.0):
    """Exact discrete Cauchy data of a solve along the window.

    Returns (g_values, psi_line, window_points): the solution's own node
    values on the window columns (endpoints included) and the co-normal
    reaction functionals at the interior window nodes. Feeding these back
    into the extension closes the weak identities at solver precision.
    """
    sp = u.grid.h
    ka, _ = _snapped_strip(aug, sp)
    a_s = ka * sp
    m = 2 * ka + 1
    loc = np.column_stack([-a_s + sp * np.arange(m), np.zeros(m)])
    world = aug.to_world(loc)
    jj = np.rint((world[:, 0] - u.grid.x0) / sp).astype(int)
    ii = np.rint((world[:, 1] - u.grid.y0) / sp).astype(int)
    drift = np.hypot(
        world[:, 0] - (u.grid.x0 + jj * sp), world[:, 1] - (u.grid.y0 + ii * sp)
    )
    if drift.max() > 1e-9 * sp:
        raise ExtensionError("window nodes do not sit on the solution grid")
    g_values = u.values[ii, jj]
    if np.any(~np.isfinite(g_values)):
        raise ExtensionError("solution carries no values on the window")
    pts, vals = system.reactions(u, src=src, c=c)
    lookup = {}
    for p, v in zip(pts, vals):
        key = (
            int(round((p[1] - u.grid.y0) / sp)),
            int(round((p[0] - u.grid.x0) / sp)),
        )
        lookup[key] = float(v)
    psi_line = np.empty(m - 2)
    for k in range(1, m - 1):
        key = (int(ii[k]), int(jj[k]))
        if key not in lookup:
            raise ExtensionError("window node missing from the reaction set")
        psi_line[k - 1] = lookup[key]
    return g_values, psi_line, world


# ---------------------------------------------------------------------------
# the extended equation
# ---------------------------------------------------------------------------


@dataclass
class ExtendedSolution:
    """Glued solution with its modified sources and recorded constants.

    values/active live on the union grid; f_tilde is nodal, F_tilde sits on
    x/y edges; interface rows carry the mean of the one-sided limits.
    """

    u_tilde: DiscreteSolution
    v: DiscreteSolution
    pair: RieszPair
    f_tilde: np.ndarray = field(repr=False)
    F_tilde_x: np.ndarray = field(repr=False)
    F_tilde_y: np.ndarray = field(repr=False)
    aug: AugmentedDomain = None
    eta: float = 0.0
    eps: float = 0.0
    constants: dict = field(default_factory=dict)

    def source_norm(self):
        """|f~| + rho0^{-1} |F~| with the package quadratures."""
        h = self.u_tilde.grid.h
        rho0 = self.aug.rho0
        act = self.u_tilde.active
        nf = math.sqrt(float(np.sum(self.f_tilde[act] ** 2)) * h * h) / rho0
        bx = act[:, 1:] & act[:, :-1]
        by = act[1:, :] & act[:-1, :]
        nF = (
            math.sqrt(
                float(
                    np.sum(self.F_tilde_x[bx] ** 2)
                    + np.sum(self.F_tilde_y[by] ** 2)
                )
                * h
                * h
            )
            / rho0
        )
        return nf + nF / rho0

    def source(self):
        """Interpolating SourceData view of (f~, F~) for quadratures."""
        g = self.u_tilde.grid
        act = self.u_tilde.active
        fsol = DiscreteSolution(g, self.f_tilde, act, act)
        fx = np.zeros_like(self.f_tilde)
        fy = np.zeros_like(self.f_tilde)
        fx[:, :-1] += self.F_tilde_x
        fx[:, 1:] += self.F_tilde_x
        fx[:, 1:-1] *= 0.5
        fy[:-1, :] += self.F_tilde_y
        fy[1:, :] += self.F_tilde_y
        fy[1:-1, :] *= 0.5
        fxs = DiscreteSolution(g, fx, act, act)
        fys = DiscreteSolution(g, fy, act, act)

        def f_at(pts):
            return np.nan_to_num(fsol.interpolate(pts))

        def F_at(pts):
            return np.stack(
                [
                    np.nan_to_num(fxs.interpolate(pts)),
                    np.nan_to_num(fys.interpolate(pts)),
                ],
                axis=-1,
            )

        return SourceData(f=f_at, F=F_at)

    def weak_residual(self, phi):
        """Residual of the glued equation against one test function."""
        h = self.u_tilde.grid.h
        ut = np.nan_to_num(self.u_tilde.values)
        B = float(
            np.sum(
                self.constants["a11_edge"]
                * np.diff(ut, axis=1)
                * np.diff(phi, axis=1)
            )
            + np.sum(
                self.constants["a22_edge"]
                * np.diff(ut, axis=0)
                * np.diff(phi, axis=0)
            )
        )
        Mc = float(np.sum(self.constants["c_nodal"] * ut * phi)) * h * h
        Mf = float(np.sum(self.f_tilde * phi)) * h * h
        EF = float(
            np.sum(self.F_tilde_x * np.diff(phi, axis=1))
            + np.sum(self.F_tilde_y * np.diff(phi, axis=0))
        ) * h
        return B - Mc + Mf - EF

    def residual_check(self, n_tests=20, seed=0):
        """Max normalized weak residual over random interior test functions."""
        rng = np.random.default_rng(seed)
        g = self.u_tilde.grid
        h = g.h
        rho0 = self.aug.rho0
        interior = self.u_tilde.unknown
        scale = norm_h1(self.u_tilde, rho0) + self.source_norm() + 1e-300
        worst = 0.0
        for _ in range(n_tests):
            phi = np.zeros((g.ny, g.nx))
            phi[interior] = rng.standard_normal(int(interior.sum()))
            nphi = (
                math.sqrt(
                    float(
                        np.sum(phi**2) * h * h
                        + rho0**2
                        * (
                            np.sum(np.diff(phi, axis=1) ** 2)
                            + np.sum(np.diff(phi, axis=0) ** 2)
                        )
                    )
                )
                / rho0
            )
            worst = max(worst, abs(self.weak_residual(phi)) / (nphi * scale))
        return worst


def _edge_coefficients(A, grid):
    nodes = grid.nodes()
    amat = A(nodes)
    a11, a22 = amat[..., 0, 0], amat[..., 1, 1]
    ex = 2.0 * a11[:, 1:] * a11[:, :-1] / np.maximum(
        a11[:, 1:] + a11[:, :-1], 1e-300
    )
    ey = 2.0 * a22[1:, :] * a22[:-1, :] / np.maximum(
        a22[1:, :] + a22[:-1, :], 1e-300
    )
    return ex, ey


def extended_equation(
    u,
    g,
    psi,
    src,
    aug,
    *,
    system=None,
    A=None,
    c=0.0,
    depth=None,
    tol=1e-6,
    n_tests=20,
    seed=0,
):
    """Glue the data extension onto the solution and verify the equation.

    ``g``/``psi`` may be None (harvested exactly from ``u`` via ``system``),
    arrays (window node values / line functionals), or callables. The glued
    function equals ``u`` bit-for-bit on the original domain; the modified
    sources are (f - f1, F - F1) there and (c v - f1, A grad v - F1) on the
    strip, with interface rows averaging the one-sided limits. The weak
    residual over random interior test functions must stay below ``tol``
    (relative, after scaling by the solution and source norms). ``u`` must
    come from an all-Dirichlet solve sharing (A, c, src).
    """
    A = identity_coefficient() if A is None else A
    sp = u.grid.h
    if not (aug.axis_aligned() and aug.flat_window()):
        raise ExtensionError(
            "the glued-region solve needs a straight, grid-aligned window"
        )
    if g is None or psi is None:
        if system is None:
            raise ExtensionError("harvesting Cauchy data needs the solve system")
        gh, ph, _ = harvest_cauchy_data(u, system, aug, src=src, c=c)
        g = gh if g is None else g
        psi = ph if psi is None else psi

    ka, kd = _snapped_strip(aug, sp, depth)
    v = extend_cauchy_data(g, aug, sp, depth=depth)
    pair = riesz_source(psi, aug, sp, depth=depth)
    grid = pair.w.grid

    # place u, then v strictly below the window, by exact index arithmetic
    values = np.full((grid.ny, grid.nx), np.nan)
    active = np.zeros((grid.ny, grid.nx), dtype=bool)
    iu, ju = _subgrid_offset(u.grid, grid)
    act_u = u.active
    values[iu : iu + u.grid.ny, ju : ju + u.grid.nx][act_u] = u.values[act_u]
    active[iu : iu + u.grid.ny, ju : ju + u.grid.nx] |= act_u
    ivs, jvs = _embed_local(aug, v.grid, grid)
    vloc_y = v.grid.nodes()[..., 1]
    place = v.active & ~np.isnan(v.values) & (vloc_y < -1e-9 * sp)
    values[ivs[place], jvs[place]] = v.values[place]
    active[ivs[place], jvs[place]] = True

    cvals = (
        np.asarray(c(grid.nodes()), dtype=float)
        if callable(c)
        else np.full((grid.ny, grid.nx), float(c))
    )
    a11e, a22e = _edge_coefficients(A, grid)

    # nodal f~ with region flags from the window geometry
    nodes = grid.nodes()
    loc = aug.to_local(nodes)
    tol_g = 1e-9 * sp
    on_window = (
        (np.abs(loc[..., 1]) < tol_g)
        & (np.abs(loc[..., 0]) < ka * sp + tol_g)
        & active
    )
    in_strip = active & (loc[..., 1] < -tol_g) & ~on_window
    in_omega = active & ~in_strip & ~on_window
    fvals = src.f_at(nodes)
    vfull = np.where(active, np.nan_to_num(values), 0.0)
    f_tilde = np.zeros((grid.ny, grid.nx))
    f_tilde[in_omega] = fvals[in_omega] - pair.f1[in_omega]
    f_tilde[in_strip] = (cvals * vfull)[in_strip] - pair.f1[in_strip]
    f_tilde[on_window] = (0.5 * (fvals + cvals * vfull) - pair.f1)[on_window]

    # edge F~: field minus F1 above, gradient of v below, mean on the window
    mid_x = 0.5 * (nodes[:, 1:] + nodes[:, :-1])
    mid_y = 0.5 * (nodes[1:, :] + nodes[:-1, :])
    Fx = src.F_at(mid_x)[..., 0] if src.F is not None else np.zeros(a11e.shape)
    Fy = src.F_at(mid_y)[..., 1] if src.F is not None else np.zeros(a22e.shape)
    dvx = a11e * np.diff(vfull, axis=1) / sp
    dvy = a22e * np.diff(vfull, axis=0) / sp
    locx = aug.to_local(mid_x)
    locy = aug.to_local(mid_y)
    win_x = (np.abs(locx[..., 1]) < tol_g) & (
        np.abs(locx[..., 0]) < ka * sp - tol_g
    )
    win_y = (np.abs(locy[..., 1]) < tol_g) & (
        np.abs(locy[..., 0]) < ka * sp - tol_g
    )
    F_tilde_x = np.where(locx[..., 1] < -tol_g, dvx, Fx) - pair.F1x
    F_tilde_x = np.where(win_x, 0.5 * (Fx + dvx) - pair.F1x, F_tilde_x)
    F_tilde_y = np.where(locy[..., 1] < -tol_g, dvy, Fy) - pair.F1y
    F_tilde_y = np.where(win_y, 0.5 * (Fy + dvy) - pair.F1y, F_tilde_y)
    bx = active[:, 1:] & active[:, :-1]
    by = active[1:, :] & active[:-1, :]
    F_tilde_x = np.where(bx, F_tilde_x, 0.0)
    F_tilde_y = np.where(by, F_tilde_y, 0.0)
    f_tilde = np.where(active, f_tilde, 0.0)

    u_tilde = DiscreteSolution(
        grid=grid,
        values=values,
        active=active,
        unknown=pair.w.unknown,
        residual=max(u.residual, v.residual, pair.w.residual),
        symmetric=u.symmetric and v.symmetric,
        meta={"glued": True},
    )
    rho0 = aug.rho0
    a_s = ka * sp
    if callable(g):
        m = 2 * ka + 1
        gl = np.column_stack([-a_s + sp * np.arange(m), np.zeros(m)])
        gv = np.asarray(g(aug.to_world(gl)), dtype=float)
    else:
        gv = np.asarray(g, dtype=float)
    eta_g = (
        trace_norm(gv[1:-1], 2 * a_s, 0.5, rho0)
        if gv[1:-1].size >= 4 and np.any(gv[1:-1])
        else 0.0
    )
    eta = eta_g + pair.constants["eta_psi"]
    eps = source_smallness(src, u_tilde, rho0=rho0)

    ext = ExtendedSolution(
        u_tilde=u_tilde,
        v=v,
        pair=pair,
        f_tilde=f_tilde,
        F_tilde_x=F_tilde_x,
        F_tilde_y=F_tilde_y,
        aug=aug,
        eta=eta,
        eps=eps,
    )
    nsrc = ext.source_norm()
    ext.constants = {
        "a11_edge": a11e,
        "a22_edge": a22e,
        "c_nodal": cvals,
        "eta_g": eta_g,
        "eta_psi": pair.constants["eta_psi"],
        "extension_constant": v.meta["extension_constant"],
        "f1est_constant": pair.constants["f1est_constant"],
        "source_norm": nsrc,
        "tildefF_constant": nsrc * rho0**2 / (eta + eps) if eta + eps else 0.0,
    }
    tol_eff = tol
    if src.F is not None:
        near = np.abs(locy[..., 1]) < 1.5 * sp
        band = float(np.abs(Fy[near]).max()) if near.any() else 0.0
        tol_eff = tol + 2.0 * sp * band
    worst = ext.residual_check(n_tests=n_tests, seed=seed)
    ext.constants["residual_max"] = worst
    ext.constants["residual_tol"] = tol_eff
    if worst > tol_eff:
        raise ExtensionError(
            f"extended equation residual {worst:.3e} exceeds tolerance "
            f"{tol_eff:.3e}"
        )
    return ext


def _subgrid_offset(sub, grid):
    ju = int(round((sub.x0 - grid.x0) / grid.h))
    iu = int(round((sub.y0 - grid.y0) / grid.h))
    if (
        abs(sub.x0 - (grid.x0 + ju * grid.h)) > 1e-9 * grid.h
        or abs(sub.y0 - (grid.y0 + iu * grid.h)) > 1e-9 * grid.h
        or abs(sub.h - grid.h) > 1e-12 * grid.h
    ):
        raise ExtensionError("solution grid does not align with the union grid")
    return iu, ju


def _embed_local(aug, vgrid, grid):
    """Union-grid indices of every local-grid node of the strip solve."""
    nodes = aug.to_world(vgrid.nodes())
    jj = np.rint((nodes[..., 0] - grid.x0) / grid.h).astype(int)
    ii = np.rint((nodes[..., 1] - grid.y0) / grid.h).astype(int)
    drift = np.hypot(
        nodes[..., 0] - (grid.x0 + jj * grid.h),
        nodes[..., 1] - (grid.y0 + ii * grid.h),
    )
    if drift.max() > 1e-9 * grid.h:
        raise ExtensionError("strip grid does not align with the union grid")
    return ii, jj


# ---------------------------------------------------------------------------
# propagation target including the anchor neighborhood
# ---------------------------------------------------------------------------


def augmented_target(aug, G):
    """Union of a target mask with the anchored cylinder below the window.

    Pads the mask canvas so the cylinder (half-width rho1 / (8 M0), height
    rho1/8 on both sides of the window) fits, and marks its cells. The
    result feeds the interior propagation run on the augmented domain.
    """
    sp = G.spacing
    pad = int(math.ceil((aug.rho1 / 8.0 + aug.rho1) / sp)) + 2
    ny, nx = G.cells.shape
    cells = np.zeros((ny + 2 * pad, nx + 2 * pad), dtype=bool)
    cells[pad : pad + ny, pad : pad + nx] = G.cells
    mask = GridMask(G.x0 - pad * sp, G.y0 - pad * sp, sp, cells)
    xs, ys = mask.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    loc = aug.to_local(np.stack([X, Y], axis=-1))
    cyl = (np.abs(loc[..., 0]) < aug.rho1 / (8 * aug.M0)) & (
        np.abs(loc[..., 1]) < aug.rho1 / 8.0
    )
    mask.cells |= cyl
    return mask


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def augmented_to_text(aug):
    """Domain text followed by a `patch` section with the window graph."""
    from .geometry import domain_to_text

    lines = [domain_to_text(aug.omega).rstrip("\n"), "patch"]
    lines.append(f"rho0 = {float(aug.rho0)!r}")
    lines.append(f"M0 = {float(aug.M0)!r}")
    lines.append(f"rho1 = {float(aug.rho1)!r}")
    lines.append(f"P = {float(aug.P[0])!r} {float(aug.P[1])!r}")
    lines.append(f"tangent = {float(aug.tangent[0])!r} {float(aug.tangent[1])!r}")
    lines.append("graph")
    for x, zv in zip(aug.xs, aug.z):
        lines.append(f"{float(x)!r} {float(zv)!r}")
    return "\n".join(lines) + "\n"


def augmented_from_text(text, n_check=2000, seed=0):
    from .geometry import domain_from_text

    lines = text.splitlines()
    try:
        split = lines.index("patch")
    except ValueError:
        raise GeometryError("augmented text needs a 'patch' section") from None
    omega = domain_from_text("\n".join(lines[:split]))
    kv = {}
    rows = []
    in_graph = False
    for ln in lines[split + 1 :]:
        ln = ln.strip()
        if not ln:
            continue
        if ln == "graph":
            in_graph = True
            continue
        if in_graph:
            a, b = ln.split()
            rows.append((float(a), float(b)))
        else:
            k, v = ln.split("=", 1)
            kv[k.strip()] = v.strip()
    rho0 = float(kv["rho0"])
    M0 = float(kv["M0"])
    rho1 = float(kv["rho1"])
    P = np.array([float(t) for t in kv["P"].split()])
    tvec = np.array([float(t) for t in kv["tangent"].split()])
    nvec = np.array([-tvec[1], tvec[0]])
    arr = np.asarray(rows, dtype=float)
    xs, z = arr[:, 0], arr[:, 1]
    zm = lowered_graph(xs, z, rho1, M0, rho0)
    r0 = rho1 / (8.0 * (math.sqrt(1.0 + M0**2) + 1.0))
    aug = AugmentedDomain(
        omega=omega,
        P=P,
        tangent=tvec,
        normal=nvec,
        rho0=rho0,
        M0=M0,
        rho1=rho1,
        xs=xs,
        z=z,
        z_minus=zm,
        r0=r0,
        x0_local=np.array([0.0, r0 - rho1 / 8.0]),
    )
    _certify(aug, n_check, seed)
    return aug


def extension_report_csv(ext, path):
    """One `quantity,value` row per recorded constant, deterministic order."""
    rows = [
        ("eta", ext.eta),
        ("eps", ext.eps),
        ("r0", ext.aug.r0),
        ("x0_x", float(ext.aug.x0[0])),
        ("x0_y", float(ext.aug.x0[1])),
    ]
    skip = {"a11_edge", "a22_edge", "c_nodal"}
    for k in sorted(ext.constants):
        if k not in skip:
            rows.append((k, float(ext.constants[k])))
    lines = ["quantity,value"] + [f"{k},{v!r}" for k, v in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
