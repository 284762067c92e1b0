"""Planar domains, boundary portions, rasterized masks and geodesic paths.

Conventions used throughout the package:

* a domain is an open connected subset of the plane;
* ``G_h`` denotes the interior envelope ``{x in G : dist(x, dG) > h}`` and
  ``G^h`` the outer envelope ``{x : dist(x, G) < h}``;
* a Lipschitz boundary portion carries constants ``(rho0, M0)`` meaning that
  around each of its points the boundary is the graph of a function Z with
  ``sup|Z| + rho0 * Lip(Z) <= M0 * rho0`` in a cylinder of half-width
  ``rho0 / M0`` and half-height ``rho0``.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "Rectangle",
    "Disc",
    "Annulus",
    "Polygon",
    "graph_patch",
    "GridMask",
    "Path",
    "LipschitzPortion",
    "rectangle_edge_portion",
    "annulus_circle_portion",
    "rho_of_point",
    "interior_envelope",
    "outer_envelope",
    "rasterize",
    "geodesic_field",
    "geodesic_path",
    "verify_lipschitz_graph",
    "boundary_layer_measure",
    "connectivity_threshold",
    "ConnectivityThreshold",
    "domain_to_text",
    "domain_from_text",
]


class GeometryError(ValueError):
    """Raised for malformed domains, disconnected masks or bad parameters."""


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------


def _as_points(pts):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[-1] != 2:
        raise GeometryError("points must have shape (..., 2)")
    return pts


class _DomainBase:
    """Shared helpers; concrete variants implement contains / boundary_distance."""

    def interior_distance(self, pts):
        """dist(x, dOmega) for inside points, 0 outside (clamped)."""
        pts = _as_points(pts)
        d = self.boundary_distance(pts)
        return np.where(self.contains(pts), d, 0.0)

    def inradius(self):
        raise NotImplementedError

    def default_spacing(self):
        # default raster pitch used by the lab when none is given
        return self.inradius() / 128.0


@dataclass(frozen=True)
class Rectangle(_DomainBase):
    """Axis-aligned open rectangle (0, width) x (0, height)."""

    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("rectangle sides must be positive")

    variant = "rectangle"

    def bounding_box(self):
        return (0.0, 0.0, self.width, self.height)

    def area(self):
        return self.width * self.height

    def inradius(self):
        return 0.5 * min(self.width, self.height)

    def contains(self, pts):
        pts = _as_points(pts)
        x, y = pts[..., 0], pts[..., 1]
        return (x > 0) & (x < self.width) & (y > 0) & (y < self.height)

    def boundary_distance(self, pts):
        pts = _as_points(pts)
        x, y = pts[..., 0], pts[..., 1]
        inside_dx = np.minimum(x, self.width - x)
        inside_dy = np.minimum(y, self.height - y)
        inside = np.minimum(inside_dx, inside_dy)
        out_dx = np.maximum(np.maximum(-x, x - self.width), 0.0)
        out_dy = np.maximum(np.maximum(-y, y - self.height), 0.0)
        outside = np.hypot(out_dx, out_dy)
        return np.where((inside_dx > 0) & (inside_dy > 0), inside, outside)

    def boundary_polyline(self, n_per_side=64):
        w, h = self.width, self.height
        corners = [(0, 0), (w, 0), (w, h), (0, h), (0, 0)]
        pts = []
        for (xa, ya), (xb, yb) in zip(corners[:-1], corners[1:]):
            t = np.linspace(0.0, 1.0, n_per_side, endpoint=False)
            pts.append(np.column_stack([xa + t * (xb - xa), ya + t * (yb - ya)]))
        pts.append([[0.0, 0.0]])
        return np.vstack(pts)


@dataclass(frozen=True)
class Disc(_DomainBase):
    """Open disc of given radius centered at the origin."""

    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError("disc radius must be positive")

    variant = "disc"

    def bounding_box(self):
        r = self.radius
        return (-r, -r, r, r)

    def area(self):
        return math.pi * self.radius**2

    def inradius(self):
        return self.radius

    def contains(self, pts):
        pts = _as_points(pts)
        return np.hypot(pts[..., 0], pts[..., 1]) < self.radius

    def boundary_distance(self, pts):
        pts = _as_points(pts)
        return np.abs(self.radius - np.hypot(pts[..., 0], pts[..., 1]))


@dataclass(frozen=True)
class Annulus(_DomainBase):
    """Open annulus r_in < |x| < r_out centered at the origin."""

    r_in: float
    r_out: float

    def __post_init__(self):
        if not (0 < self.r_in < self.r_out):
            raise GeometryError("annulus needs 0 < r_in < r_out")

    variant = "annulus"

    def bounding_box(self):
        r = self.r_out
        return (-r, -r, r, r)

    def area(self):
        return math.pi * (self.r_out**2 - self.r_in**2)

    def inradius(self):
        return 0.5 * (self.r_out - self.r_in)

    def contains(self, pts):
        pts = _as_points(pts)
        r = np.hypot(pts[..., 0], pts[..., 1])
        return (r > self.r_in) & (r < self.r_out)

    def boundary_distance(self, pts):
        pts = _as_points(pts)
        r = np.hypot(pts[..., 0], pts[..., 1])
        return np.minimum(np.abs(r - self.r_in), np.abs(r - self.r_out))


def _shoelace(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


@dataclass(frozen=True)
class Polygon(_DomainBase):
    """Simple polygon, vertices in counterclockwise order."""

    vertices: tuple

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise GeometryError("polygon needs at least 3 vertices of shape (m, 2)")
        if _shoelace(v) <= 0:
            raise GeometryError("polygon vertices must be counterclockwise")
        object.__setattr__(
            self, "vertices", tuple((float(a), float(b)) for a, b in v)
        )

    variant = "polygon"

    def _verts(self):
        return np.asarray(self.vertices, dtype=float)

    def bounding_box(self):
        v = self._verts()
        return (v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    def area(self):
        return float(_shoelace(self._verts()))

    def contains(self, pts):
        # even-odd ray casting, vectorized over points
        pts = _as_points(pts)
        v = self._verts()
        x = pts[..., 0][..., None]
        y = pts[..., 1][..., None]
        x1, y1 = v[:, 0], v[:, 1]
        x2, y2 = np.roll(v[:, 0], -1), np.roll(v[:, 1], -1)
        cond = (y1 <= y) != (y2 <= y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        crossings = np.sum(cond & (x < xint), axis=-1)
        return crossings % 2 == 1

    def boundary_distance(self, pts):
        pts = _as_points(pts)
        v = self._verts()
        a = v
        b = np.roll(v, -1, axis=0)
        ab = b - a
        ab2 = np.sum(ab**2, axis=1)
        p = pts[..., None, :]
        ap = p - a
        t = np.clip(np.sum(ap * ab, axis=-1) / ab2, 0.0, 1.0)
        proj = a + t[..., None] * ab
        d = np.linalg.norm(p - proj, axis=-1)
        return d.min(axis=-1)

    def inradius(self):
        # approximate: max boundary distance over a raster of interior points
        x0, y0, x1, y1 = self.bounding_box()
        n = 200
        xs = np.linspace(x0, x1, n)
        ys = np.linspace(y0, y1, n)
        X, Y = np.meshgrid(xs, ys)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        inside = self.contains(pts)
        if not inside.any():
            raise GeometryError("degenerate polygon: no interior raster points")
        return float(self.boundary_distance(pts[inside]).max())


def graph_patch(xs, z, rho0, M0, top=None):
    """Domain above a Lipschitz graph inside its defining cylinder.

    The patch is ``{(x, y) : |x| < rho0/M0, z(x) < y < top}`` realized as a
    polygon through the samples ``(xs, z)``; ``top`` defaults to ``rho0``.
    """
    xs = np.asarray(xs, dtype=float)
    z = np.asarray(z, dtype=float)
    if xs.ndim != 1 or xs.shape != z.shape or xs.size < 2:
        raise GeometryError("graph samples must be two equal 1-d arrays")
    if not np.all(np.diff(xs) > 0):
        raise GeometryError("graph sample abscissas must be increasing")
    a = rho0 / M0
    if abs(xs[0] + a) > 1e-12 * max(1.0, a) or abs(xs[-1] - a) > 1e-12 * max(1.0, a):
        raise GeometryError("graph samples must span [-rho0/M0, rho0/M0]")
    if not verify_lipschitz_graph(xs, z, rho0, M0):
        raise GeometryError("graph violates the (rho0, M0) Lipschitz bounds")
    top = rho0 if top is None else float(top)
    if top <= z.max():
        raise GeometryError("patch top must lie above the graph")
    verts = [(xs[i], z[i]) for i in range(xs.size)]
    verts += [(xs[-1], top), (xs[0], top)]
    return Polygon(tuple(verts))


# ---------------------------------------------------------------------------
# raster masks
# ---------------------------------------------------------------------------


@dataclass
class GridMask:
    """Boolean raster on cell centers of a uniform grid.

    Cell (i, j) covers ``[x0 + j*h, x0 + (j+1)*h] x [y0 + i*h, y0 + (i+1)*h]``
    with center ``(x0 + (j+0.5)h, y0 + (i+0.5)h)``.
    """

    x0: float
    y0: float
    spacing: float
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=bool)
        if self.cells.ndim != 2:
            raise GeometryError("mask cells must be a 2-d boolean array")
        if not self.spacing > 0:
            raise GeometryError("mask spacing must be positive")

    @property
    def shape(self):
        return self.cells.shape

    def count(self):
        return int(self.cells.sum())

    def area(self):
        return self.count() * self.spacing**2

    def cell_centers(self):
        ny, nx = self.cells.shape
        xs = self.x0 + (np.arange(nx) + 0.5) * self.spacing
        ys = self.y0 + (np.arange(ny) + 0.5) * self.spacing
        return xs, ys

    def centers_of(self, idx):
        idx = np.asarray(idx)
        i, j = idx[..., 0], idx[..., 1]
        return np.stack(
            [self.x0 + (j + 0.5) * self.spacing, self.y0 + (i + 0.5) * self.spacing],
            axis=-1,
        )

    def index_of(self, pts):
        pts = _as_points(pts)
        j = np.floor((pts[..., 0] - self.x0) / self.spacing).astype(int)
        i = np.floor((pts[..., 1] - self.y0) / self.spacing).astype(int)
        return np.stack([i, j], axis=-1)

    def contains_points(self, pts):
        pts = _as_points(pts)
        idx = self.index_of(pts)
        i, j = idx[..., 0], idx[..., 1]
        ny, nx = self.cells.shape
        ok = (i >= 0) & (i < ny) & (j >= 0) & (j < nx)
        out = np.zeros(ok.shape, dtype=bool)
        out[ok] = self.cells[i[ok], j[ok]]
        return out

    def component_count(self):
        from scipy import ndimage

        _, n = ndimage.label(self.cells, structure=np.ones((3, 3), dtype=int))
        return int(n)

    def to_pgm(self, path):
        ny, nx = self.cells.shape
        rows = []
        # top row first so the file reads like the plane seen from above
        for i in range(ny - 1, -1, -1):
            rows.append(" ".join("255" if v else "0" for v in self.cells[i]))
        text = "P2\n{} {}\n255\n{}\n".format(nx, ny, "\n".join(rows))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def rasterize(domain, spacing=None, pad=0.0):
    """Raster of a domain at the given cell pitch (default inradius/128)."""
    h = domain.default_spacing() if spacing is None else float(spacing)
    x0, y0, x1, y1 = domain.bounding_box()
    x0 -= pad
    y0 -= pad
    x1 += pad
    y1 += pad
    nx = max(1, int(math.ceil((x1 - x0) / h)))
    ny = max(1, int(math.ceil((y1 - y0) / h)))
    xs = x0 + (np.arange(nx) + 0.5) * h
    ys = y0 + (np.arange(ny) + 0.5) * h
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X, Y], axis=-1)
    return GridMask(x0, y0, h, domain.contains(pts))


def interior_envelope(domain, h, spacing=None):
    """Raster of ``G_h = {x in G : dist(x, dG) > h}``."""
    if h < 0:
        raise GeometryError("envelope offset h must be nonnegative")
    hg = domain.default_spacing() if spacing is None else float(spacing)
    x0, y0, x1, y1 = domain.bounding_box()
    nx = max(1, int(math.ceil((x1 - x0) / hg)))
    ny = max(1, int(math.ceil((y1 - y0) / hg)))
    xs = x0 + (np.arange(nx) + 0.5) * hg
    ys = y0 + (np.arange(ny) + 0.5) * hg
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X, Y], axis=-1)
    inside = domain.contains(pts) & (domain.boundary_distance(pts) > h)
    return GridMask(x0, y0, hg, inside)


def outer_envelope(domain, h, spacing=None):
    """Raster of ``G^h = {x : dist(x, G) < h}``."""
    if h < 0:
        raise GeometryError("envelope offset h must be nonnegative")
    hg = domain.default_spacing() if spacing is None else float(spacing)
    x0, y0, x1, y1 = domain.bounding_box()
    x0 -= h
    y0 -= h
    x1 += h
    y1 += h
    nx = max(1, int(math.ceil((x1 - x0) / hg)))
    ny = max(1, int(math.ceil((y1 - y0) / hg)))
    xs = x0 + (np.arange(nx) + 0.5) * hg
    ys = y0 + (np.arange(ny) + 0.5) * hg
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X, Y], axis=-1)
    inside = domain.contains(pts) | (domain.boundary_distance(pts) < h)
    return GridMask(x0, y0, hg, inside)


# ---------------------------------------------------------------------------
# Lipschitz boundary portions
# ---------------------------------------------------------------------------


def verify_lipschitz_graph(xs, z, rho0, M0, tol=1e-9):
    """Check ``sup|Z| + rho0 * Lip(Z) <= M0 * rho0`` for a sampled graph.

    The graph is pinned at the origin: Z(0) must vanish (within tol).
    """
    xs = np.asarray(xs, dtype=float)
    z = np.asarray(z, dtype=float)
    if xs.size < 2:
        raise GeometryError("need at least 2 graph samples")
    z0 = float(np.interp(0.0, xs, z))
    if abs(z0) > tol * max(1.0, rho0):
        return False
    slopes = np.diff(z) / np.diff(xs)
    norm = np.abs(z).max() + rho0 * np.abs(slopes).max()
    return bool(norm <= M0 * rho0 * (1.0 + tol) + tol)


def _as_polylines(obj):
    # a single (m, 2) array, or a list/tuple of such arrays for a
    # disconnected complement (no phantom segments between pieces)
    if isinstance(obj, (list, tuple)):
        return [_as_points(p) for p in obj]
    return [_as_points(obj)]


@dataclass
class LipschitzPortion:
    """Open portion Sigma of a Lipschitz boundary with its constants.

    ``sigma`` is a polyline sampling Sigma; ``sigma_prime`` samples the
    complement in the boundary (one polyline or a list of them); ``P`` is a
    reference interior point of Sigma.
    """

    domain: object
    sigma: np.ndarray
    sigma_prime: object
    rho0: float
    M0: float
    P: np.ndarray | None = None
    rho1: float | None = None

    def __post_init__(self):
        self.sigma = _as_points(self.sigma)
        self.sigma_prime = _as_polylines(self.sigma_prime)
        if self.sigma.shape[0] < 2 or any(p.shape[0] < 2 for p in self.sigma_prime):
            raise GeometryError("portion polylines need at least 2 points")
        if not (self.rho0 > 0 and self.M0 > 0):
            raise GeometryError("rho0 and M0 must be positive")
        if self.P is not None:
            self.P = np.asarray(self.P, dtype=float).reshape(2)
            if self.rho1 is not None:
                lim = rho_of_point(self, self.P)
                if self.rho1 > lim * (1 + 1e-9):
                    raise GeometryError(
                        f"rho1 = {self.rho1} exceeds rho(P) = {lim}"
                    )

    def arclength(self):
        return float(np.sum(np.linalg.norm(np.diff(self.sigma, axis=0), axis=1)))


def _dist_to_polyline(pts, line):
    pts = _as_points(pts)
    a = line[:-1]
    b = line[1:]
    ab = b - a
    ab2 = np.maximum(np.sum(ab**2, axis=1), 1e-300)
    p = pts[..., None, :]
    ap = p - a
    t = np.clip(np.sum(ap * ab, axis=-1) / ab2, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1).min(axis=-1)


def rho_of_point(portion, P):
    """Working scale rho(P) = min(rho0, dist(P, Sigma') * M0 / sqrt(1 + M0^2))."""
    P = np.asarray(P, dtype=float).reshape(1, 2)
    r = min(float(_dist_to_polyline(P, line)[0]) for line in portion.sigma_prime)
    return min(portion.rho0, r * portion.M0 / math.sqrt(1.0 + portion.M0**2))


def rectangle_edge_portion(rect, edge, rho0, M0, P=None, rho1=None, n=257):
    """Portion of a rectangle boundary consisting of one full edge."""
    w, h = rect.width, rect.height
    t = np.linspace(0.0, 1.0, n)
    edges = {
        "bottom": np.column_stack([t * w, np.zeros(n)]),
        "top": np.column_stack([t * w, np.full(n, h)]),
        "left": np.column_stack([np.zeros(n), t * h]),
        "right": np.column_stack([np.full(n, w), t * h]),
    }
    if edge not in edges:
        raise GeometryError(f"unknown edge {edge!r}")
    sigma = edges[edge]
    rest = [edges[e] for e in edges if e != edge]
    if P is None:
        P = sigma[n // 2]
    return LipschitzPortion(rect, sigma, rest, rho0, M0, P=P, rho1=rho1)


def annulus_circle_portion(ann, which, rho0, M0, n=512):
    """Portion of an annulus boundary consisting of one full circle."""
    r = {"inner": ann.r_in, "outer": ann.r_out}.get(which)
    if r is None:
        raise GeometryError(f"unknown circle {which!r}")
    other = ann.r_out if which == "inner" else ann.r_in
    th = np.linspace(0.0, 2.0 * math.pi, n)
    sigma = np.column_stack([r * np.cos(th), r * np.sin(th)])
    rest = np.column_stack([other * np.cos(th), other * np.sin(th)])
    P = np.array([r, 0.0])
    return LipschitzPortion(ann, sigma, rest, rho0, M0, P=P)


# ---------------------------------------------------------------------------
# geodesics on masks
# ---------------------------------------------------------------------------


@dataclass
class Path:
    """Polyline path with cached length."""

    points: np.ndarray

    def __post_init__(self):
        self.points = _as_points(self.points)

    @property
    def length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


_NBRS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def geodesic_field(mask, x0):
    """Dijkstra distance and parent fields from x0 over 8-connected mask cells.

    Returns (dist, parent) arrays of the mask shape; dist is +inf off the
    component of x0, parent holds flat indices (-1 at the source / off mask).
    """
    cells = mask.cells
    ny, nx = cells.shape
    i0, j0 = mask.index_of(np.asarray(x0, dtype=float))[0]
    if not (0 <= i0 < ny and 0 <= j0 < nx) or not cells[i0, j0]:
        raise GeometryError("source point is not inside the mask")
    h = mask.spacing
    dist = np.full((ny, nx), np.inf)
    parent = np.full((ny, nx), -1, dtype=np.int64)
    dist[i0, j0] = 0.0
    pq = [(0.0, int(i0) * nx + int(j0))]
    diag = h * math.sqrt(2.0)
    while pq:
        d, flat = heapq.heappop(pq)
        i, j = divmod(flat, nx)
        if d > dist[i, j]:
            continue
        for di, dj in _NBRS:
            ii, jj = i + di, j + dj
            if 0 <= ii < ny and 0 <= jj < nx and cells[ii, jj]:
                # forbid diagonal moves that cut between two blocked cells
                if di != 0 and dj != 0 and not (cells[i, jj] or cells[ii, j]):
                    continue
                nd = d + (diag if di != 0 and dj != 0 else h)
                if nd < dist[ii, jj]:
                    dist[ii, jj] = nd
                    parent[ii, jj] = flat
                    heapq.heappush(pq, (nd, ii * nx + jj))
    return dist, parent


def _trace_parents(mask, parent, target_idx):
    ny, nx = mask.cells.shape
    chain = []
    flat = int(target_idx[0]) * nx + int(target_idx[1])
    while flat >= 0:
        chain.append(divmod(flat, nx))
        flat = int(parent[chain[-1][0], chain[-1][1]])
    chain.reverse()
    return np.asarray(chain)


def _segment_in_mask(mask, a, b):
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / (0.5 * mask.spacing))) + 1)
    t = np.linspace(0.0, 1.0, n)
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    return bool(mask.contains_points(pts).all())


def geodesic_path(mask, x0, y, field=None):
    """Shortest mask path from x0 to y, smoothed by line-of-sight shortcuts.

    The smoothing never lengthens the path, so the returned length is at most
    the raw 8-connected geodesic length and at least |x0 - y|.
    """
    x0 = np.asarray(x0, dtype=float).reshape(2)
    y = np.asarray(y, dtype=float).reshape(2)
    if not mask.contains_points(y)[0]:
        raise GeometryError("target point is not inside the mask")
    dist, parent = geodesic_field(mask, x0) if field is None else field
    iy = mask.index_of(y)[0]
    if not np.isfinite(dist[iy[0], iy[1]]):
        raise GeometryError("target is disconnected from the source in the mask")
    idx = _trace_parents(mask, parent, iy)
    pts = mask.centers_of(idx)
    pts = np.vstack([x0[None, :], pts, y[None, :]])
    # greedy line-of-sight simplification
    out = [pts[0]]
    k = 0
    while k < len(pts) - 1:
        m = len(pts) - 1
        while m > k + 1 and not _segment_in_mask(mask, pts[k], pts[m]):
            m -= 1
        out.append(pts[m])
        k = m
    return Path(np.asarray(out))


# ---------------------------------------------------------------------------
# measures and thresholds
# ---------------------------------------------------------------------------


def boundary_layer_measure(domain, h, spacing=None):
    """Area of the boundary layer ``Omega \\ Omega_h``.

    Exact for rectangles, discs and annuli; raster count otherwise.
    """
    if h < 0:
        raise GeometryError("layer width must be nonnegative")
    if isinstance(domain, Rectangle):
        w, ht = domain.width, domain.height
        inner = max(w - 2 * h, 0.0) * max(ht - 2 * h, 0.0)
        return w * ht - inner
    if isinstance(domain, Disc):
        return math.pi * (domain.radius**2 - max(domain.radius - h, 0.0) ** 2)
    if isinstance(domain, Annulus):
        lo, hi = domain.r_in + h, domain.r_out - h
        inner = math.pi * (hi**2 - lo**2) if hi > lo else 0.0
        return domain.area() - inner
    full = rasterize(domain, spacing)
    kept = interior_envelope(domain, h, spacing or full.spacing)
    return full.area() - kept.area()


@dataclass(frozen=True)
class ConnectivityThreshold:
    """Scales below which interior envelopes of a Lipschitz domain stay connected."""

    h0: float
    d0: float


def connectivity_threshold(rho0, M0):
    """h0 = rho0 / (4 M0 (1 + sqrt(1 + M0^2))) and d0 = rho0 / (2 M0)."""
    if not (rho0 > 0 and M0 > 0):
        raise GeometryError("rho0 and M0 must be positive")
    h0 = rho0 / (4.0 * M0 * (1.0 + math.sqrt(1.0 + M0**2)))
    d0 = rho0 / (2.0 * M0)
    return ConnectivityThreshold(h0=h0, d0=d0)


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def domain_to_text(domain):
    """Line-oriented form: 'domain <variant>' then 'key = value' / 'x y' lines."""
    lines = [f"domain {domain.variant}"]
    if isinstance(domain, Rectangle):
        lines += [f"width = {domain.width!r}", f"height = {domain.height!r}"]
    elif isinstance(domain, Disc):
        lines += [f"radius = {domain.radius!r}"]
    elif isinstance(domain, Annulus):
        lines += [f"r_in = {domain.r_in!r}", f"r_out = {domain.r_out!r}"]
    elif isinstance(domain, Polygon):
        lines += [f"{x!r} {y!r}" for x, y in domain.vertices]
    else:
        raise GeometryError(f"cannot serialize domain {domain!r}")
    return "\n".join(lines) + "\n"


def domain_from_text(text):
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("domain "):
        raise GeometryError("domain text must start with 'domain <variant>'")
    variant = lines[0].split(None, 1)[1].strip()
    kv = {}
    pts = []
    for ln in lines[1:]:
        if "=" in ln:
            k, v = ln.split("=", 1)
            kv[k.strip()] = float(v.strip())
        else:
            parts = ln.split()
            if len(parts) != 2:
                raise GeometryError(f"bad vertex line {ln!r}")
            pts.append((float(parts[0]), float(parts[1])))
    if variant == "rectangle":
        return Rectangle(kv["width"], kv["height"])
    if variant == "disc":
        return Disc(kv["radius"])
    if variant == "annulus":
        return Annulus(kv["r_in"], kv["r_out"])
    if variant == "polygon":
        return Polygon(tuple(pts))
    raise GeometryError(f"unknown domain variant {variant!r}")
