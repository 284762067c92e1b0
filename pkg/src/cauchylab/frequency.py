"""Frequency-function machinery on circles: H, I, N, and their inequalities.

For a solution u of div(A grad u) = 0 normalized so that A(center) = Id,

    H(r) = int_{dB_r} mu u^2 ds,   mu = (A x . x)/|x|^2,
    I(r) = int_{B_r}  A grad u . grad u,
    N(r) = r I(r) / H(r),

with x relative to the center. N is the frequency: for the homogeneous
harmonic Re(z^m) it equals m at every radius, and exp(C r / rho0) N(r) is
nondecreasing for Lipschitz coefficients. Three-spheres and doubling
inequalities are verified against these quantities; the ellipsoid change of
variables reduces a general constant matrix at the center to the identity.

Circle integrals use angular midpoint quadrature (spectrally accurate for
smooth fields); area integrals use Gauss-Legendre in radius for analytic
inputs and masked-cell sums for grid solutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pde import DiscreteSolution

__all__ = [
    "FrequencyError",
    "RadialProfile",
    "SphereTriple",
    "radial_profile",
    "profile_to_csv",
    "MonotonicityReport",
    "frequency_monotonicity_check",
    "ThreeSpheresReport",
    "three_spheres_verify",
    "DoublingReport",
    "doubling_check",
    "EllipsoidMap",
    "ellipsoid_transform",
]

H_DEFINED_FLOOR = 1e-14  # below this fraction of max H, N is undefined


class FrequencyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def _eval(u, pts):
    if isinstance(u, DiscreteSolution):
        vals = u.interpolate(pts)
    else:
        vals = np.asarray(u(pts), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FrequencyError("evaluation circle leaves the solution's region")
    return vals


def _gradient(u, pts, grad=None, eps=1e-6):
    if grad is not None:
        return np.asarray(grad(pts), dtype=float)
    dx = np.array([eps, 0.0])
    dy = np.array([0.0, eps])
    gx = (_eval(u, pts + dx) - _eval(u, pts - dx)) / (2 * eps)
    gy = (_eval(u, pts + dy) - _eval(u, pts - dy)) / (2 * eps)
    return np.stack([gx, gy], axis=-1)


def _circle(center, r, m):
    th = (np.arange(m) + 0.5) * (2 * math.pi / m)
    n = np.stack([np.cos(th), np.sin(th)], axis=-1)
    return np.asarray(center, dtype=float) + r * n, n


def _mu(A, pts, n):
    a = A(pts)
    return np.einsum("...i,...ij,...j->...", n, a, n)


def _cell_interp(grid, cellvals, pts):
    """Bilinear interpolation on the cell-center lattice of a RectGrid."""
    pts = np.asarray(pts, dtype=float)
    x0 = grid.x0 + 0.5 * grid.h
    y0 = grid.y0 + 0.5 * grid.h
    fx = (pts[..., 0] - x0) / grid.h
    fy = (pts[..., 1] - y0) / grid.h
    ny, nx = cellvals.shape
    j0 = np.clip(np.floor(fx).astype(int), 0, nx - 2)
    i0 = np.clip(np.floor(fy).astype(int), 0, ny - 2)
    tx, ty = fx - j0, fy - i0
    v = cellvals
    return (
        v[i0, j0] * (1 - tx) * (1 - ty)
        + v[i0, j0 + 1] * tx * (1 - ty)
        + v[i0 + 1, j0] * (1 - tx) * ty
        + v[i0 + 1, j0 + 1] * tx * ty
    )


def _energy_analytic(u, A, center, r, m, grad):
    # Gauss-Legendre in radius times angular midpoint
    xg, wg = np.polynomial.legendre.leggauss(64)
    rs = 0.5 * r * (xg + 1.0)
    wr = 0.5 * r * wg
    th = (np.arange(m) + 0.5) * (2 * math.pi / m)
    n = np.stack([np.cos(th), np.sin(th)], axis=-1)
    total = 0.0
    for rk, wk in zip(rs, wr):
        pts = np.asarray(center, dtype=float) + rk * n
        g = _gradient(u, pts, grad)
        a = A(pts)
        dens = np.einsum("...i,...ij,...j->...", g, a, g)
        total += wk * rk * dens.mean() * 2 * math.pi
    return total


def _energy_cells(sol, A, center, r):
    centers = sol.grid.cell_centers()
    d2 = (centers[..., 0] - center[0]) ** 2 + (centers[..., 1] - center[1]) ** 2
    mask = sol.valid_cells() & (d2 < r * r)
    gx, gy = sol.cell_gradients()
    g = np.stack([gx[mask], gy[mask]], axis=-1)
    a = A(centers[mask])
    dens = np.einsum("...i,...ij,...j->...", g, a, g)
    return float(np.sum(dens) * sol.grid.h**2)


# ---------------------------------------------------------------------------
# radial profiles
# ---------------------------------------------------------------------------


@dataclass
class RadialProfile:
    """Sampled H, I, N along increasing radii; N is NaN where H vanishes."""

    radii: np.ndarray
    H: np.ndarray
    I: np.ndarray
    N: np.ndarray
    rho0: float = 1.0
    angular_nodes: int = 512
    notes: list = field(default_factory=list)

    def defined(self):
        return np.isfinite(self.N)


def radial_profile(
    u,
    A,
    center,
    radii,
    rho0=1.0,
    angular_nodes=512,
    grad=None,
    energy="auto",
):
    """Sample H(r), I(r), N(r) around a center with A(center) = Identity.

    ``energy`` picks the I quadrature: "area" (masked cells for grid
    solutions, radial Gauss-Legendre otherwise) or "flux", the boundary
    integral int_{dB_r} u A grad u . n, valid when u solves the equation.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or radii.size < 1:
        raise FrequencyError("radii must be a nonempty 1-d sequence")
    if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise FrequencyError("radii must be positive and strictly increasing")
    if angular_nodes < 256:
        raise FrequencyError("need at least 256 angular nodes")
    center = np.asarray(center, dtype=float)
    a0 = A(center)
    if np.abs(a0 - np.eye(2)).max() > 1e-12:
        raise FrequencyError(
            "A(center) must be the identity; apply ellipsoid_transform first"
        )

    m = int(angular_nodes)
    Hs, Is = [], []
    notes = []
    for r in radii:
        pts, n = _circle(center, r, m)
        vals = _eval(u, pts)
        mu = _mu(A, pts, n)
        ds = 2 * math.pi * r / m
        Hs.append(float(np.sum(mu * vals**2) * ds))
        if energy == "flux":
            g = _gradient(u, pts, grad)
            a = A(pts)
            co = np.einsum("...ij,...j->...i", a, g)
            Is.append(float(np.sum(np.einsum("...i,...i->...", co, n) * vals) * ds))
        elif isinstance(u, DiscreteSolution):
            Is.append(_energy_cells(u, A, center, r))
        else:
            Is.append(_energy_analytic(u, A, center, r, m, grad))
    Hs = np.array(Hs)
    Is = np.array(Is)
    floor = H_DEFINED_FLOOR * max(Hs.max(), 1e-300)
    N = np.where(Hs > floor, radii * Is / np.where(Hs > floor, Hs, 1.0), np.nan)
    if np.any(Hs <= floor):
        notes.append(
            "H vanishes at some radii: boundary values are zero there, so u"
            " may vanish identically on an inner ball; N left undefined"
        )
    return RadialProfile(
        radii=radii,
        H=Hs,
        I=Is,
        N=N,
        rho0=rho0,
        angular_nodes=m,
        notes=notes,
    )


def profile_to_csv(profile, path):
    lines = ["r,H,I,N"]
    for r, h, i, n in zip(profile.radii, profile.H, profile.I, profile.N):
        lines.append(f"{float(r)!r},{float(h)!r},{float(i)!r},{float(n)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# monotonicity of the weighted frequency
# ---------------------------------------------------------------------------


@dataclass
class MonotonicityReport:
    C: float  # smallest C >= 0 making exp(C r / rho0) N(r) nondecreasing
    passed: bool
    tolerance: float
    excluded: int  # radii with undefined N
    notes: list = field(default_factory=list)


def frequency_monotonicity_check(profile, tol=1e-2):
    """Smallest C >= 0 with exp(C r / rho0) N(r) nondecreasing on samples.

    Decreases within tol * max N are forgiven before computing C, so a
    constant-N profile reports C = 0 despite quadrature noise.
    """
    ok = profile.defined()
    r = profile.radii[ok]
    N = profile.N[ok]
    if r.size < 5:
        raise FrequencyError("monotonicity check needs at least 5 defined radii")
    slack = tol * float(np.nanmax(np.abs(N)))
    C = 0.0
    notes = list(profile.notes)
    passed = True
    for i in range(r.size - 1):
        hi, lo = N[i], N[i + 1]
        if lo + slack >= hi:
            continue
        if lo <= 0:
            passed = False
            notes.append(f"N drops to {lo:.3e} at r={r[i + 1]:.4g}: no finite C")
            continue
        need = profile.rho0 * math.log((hi - slack) / lo) / (r[i + 1] - r[i])
        C = max(C, need)
    return MonotonicityReport(
        C=C,
        passed=passed,
        tolerance=tol,
        excluded=int((~ok).sum()),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# three spheres
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereTriple:
    r1: float
    r2: float
    r3: float
    mode: str = "unrestricted"
    K: float = 1.0

    def __post_init__(self):
        if not 0 < self.r1 < self.r2 < self.r3:
            raise FrequencyError("radii must satisfy 0 < r1 < r2 < r3")
        if self.mode not in ("unrestricted", "restricted"):
            raise FrequencyError(f"unknown mode {self.mode!r}")
        if self.K < 1.0:
            raise FrequencyError("ellipticity constant K must be >= 1")
        if self.mode == "restricted" and not self.r2 < self.r3 / self.K:
            raise FrequencyError("restricted mode requires r2 < r3 / K")

    def exponent(self, C=1.0):
        """Interpolation exponent alpha for the middle radius.

        Unrestricted (unit ellipticity): log(r3/r2) / log(r3/r1).
        Restricted: log(r3/(K r2)) / (log(r3/(K r2)) + C log(K r2/r1)).
        """
        if self.mode == "unrestricted":
            return math.log(self.r3 / self.r2) / math.log(self.r3 / self.r1)
        num = math.log(self.r3 / (self.K * self.r2))
        den = num + C * math.log(self.K * self.r2 / self.r1)
        return num / den


@dataclass
class ThreeSpheresReport:
    triple: SphereTriple
    norm: str
    norms: tuple
    alpha: float
    Q: float  # minimal Q with n2 <= Q n1^alpha n3^(1-alpha)
    Q_cap: float
    passed: bool


def _sphere_norm(u, center, r, kind, m):
    pts, _ = _circle(center, r, m)
    vals = _eval(u, pts)
    if kind == "linf":
        return float(np.abs(vals).max())
    ds = 2 * math.pi * r / m
    return float(math.sqrt(np.sum(vals**2) * ds))


def _ball_norm(u, center, r, m):
    if isinstance(u, DiscreteSolution):
        centers = u.grid.cell_centers()
        d2 = (centers[..., 0] - center[0]) ** 2 + (
            centers[..., 1] - center[1]
        ) ** 2
        mask = u.valid_cells() & (d2 < r * r)
        vals = u.cell_means()[mask]
        return float(math.sqrt(np.sum(vals**2) * u.grid.h**2))
    xg, wg = np.polynomial.legendre.leggauss(64)
    rs = 0.5 * r * (xg + 1.0)
    wr = 0.5 * r * wg
    th = (np.arange(m) + 0.5) * (2 * math.pi / m)
    n = np.stack([np.cos(th), np.sin(th)], axis=-1)
    total = 0.0
    for rk, wk in zip(rs, wr):
        vals = _eval(u, np.asarray(center, dtype=float) + rk * n)
        total += wk * rk * float(np.mean(vals**2)) * 2 * math.pi
    return math.sqrt(total)


def three_spheres_verify(
    u,
    triple,
    center=(0.0, 0.0),
    norm="linf",
    C=1.0,
    Q_cap=10.0,
    angular_nodes=512,
):
    """Measure the minimal Q in the three-spheres interpolation inequality."""
    if norm not in ("linf", "l2_sphere", "l2_ball"):
        raise FrequencyError(f"unknown norm kind {norm!r}")
    m = int(angular_nodes)
    if norm == "l2_ball":
        ns = tuple(_ball_norm(u, center, r, m) for r in (triple.r1, triple.r2, triple.r3))
    else:
        kind = "linf" if norm == "linf" else "l2"
        ns = tuple(
            _sphere_norm(u, center, r, kind, m)
            for r in (triple.r1, triple.r2, triple.r3)
        )
    alpha = triple.exponent(C=C)
    if ns[0] <= 0 or ns[2] <= 0:
        raise FrequencyError("degenerate norms: u vanishes on a reference sphere")
    Q = ns[1] / (ns[0] ** alpha * ns[2] ** (1.0 - alpha))
    return ThreeSpheresReport(
        triple=triple,
        norm=norm,
        norms=ns,
        alpha=alpha,
        Q=Q,
        Q_cap=Q_cap,
        passed=Q <= Q_cap,
    )


# ---------------------------------------------------------------------------
# doubling
# ---------------------------------------------------------------------------


@dataclass
class DoublingReport:
    radii: np.ndarray
    H_ratio: np.ndarray  # H(2r) / H(r)
    ball_ratio: np.ndarray  # int_{B_2r} u^2 / int_{B_r} u^2
    max_H_ratio: float
    max_ball_ratio: float
    vanishing_order: float  # m from ball ratio ~ 2^(2m+2)
    bounded: bool


def doubling_check(u, A, center, r_list, angular_nodes=512, grad=None):
    """Doubling ratios of H and of the solid L2 mass at each radius."""
    r_list = np.asarray(r_list, dtype=float)
    m = int(angular_nodes)
    center = np.asarray(center, dtype=float)
    Hr, H2r, Br, B2r = [], [], [], []
    for r in r_list:
        for rr, hs, bs in ((r, Hr, Br), (2 * r, H2r, B2r)):
            pts, n = _circle(center, rr, m)
            vals = _eval(u, pts)
            mu = _mu(A, pts, n)
            hs.append(float(np.sum(mu * vals**2) * 2 * math.pi * rr / m))
            bs.append(_ball_norm(u, center, rr, m) ** 2)
    H_ratio = np.array(H2r) / np.array(Hr)
    ball_ratio = np.array(B2r) / np.array(Br)
    order = float(np.mean((np.log2(ball_ratio) - 2.0) / 2.0))
    return DoublingReport(
        radii=r_list,
        H_ratio=H_ratio,
        ball_ratio=ball_ratio,
        max_H_ratio=float(H_ratio.max()),
        max_ball_ratio=float(ball_ratio.max()),
        vanishing_order=order,
        bounded=bool(np.isfinite(H_ratio).all() and np.isfinite(ball_ratio).all()),
    )


# ---------------------------------------------------------------------------
# ellipsoid change of variables
# ---------------------------------------------------------------------------


@dataclass
class EllipsoidMap:
    """x -> J x with J = A0^{-1/2}; E_r = image of B_r under A0^{1/2}."""

    A0: np.ndarray
    J: np.ndarray
    eigenvalues: np.ndarray
    K: float

    def semi_axes(self, r):
        return np.sqrt(self.eigenvalues) * r

    def radius_maps(self, r1, r2, r3):
        """Transformed radii (r1/sqrt K, sqrt K r2, r3/sqrt K)."""
        s = math.sqrt(self.K)
        return (r1 / s, s * r2, r3 / s)

    def sandwich_check(self, r, samples=360):
        """B_{r/sqrt K} subset E_r subset B_{sqrt K r} on boundary samples."""
        th = np.linspace(0.0, 2 * math.pi, samples, endpoint=False)
        omega = np.stack([np.cos(th), np.sin(th)], axis=-1)
        half = _sqrtm_spd(self.A0)
        bdry = (omega @ half.T) * r
        dist = np.hypot(bdry[:, 0], bdry[:, 1])
        s = math.sqrt(self.K)
        return bool(
            np.all(dist >= r / s - 1e-12) and np.all(dist <= s * r + 1e-12)
        )


def _sqrtm_spd(a):
    lam, vec = np.linalg.eigh(a)
    if np.any(lam <= 0):
        raise FrequencyError("matrix is not symmetric positive definite")
    return (vec * np.sqrt(lam)) @ vec.T


def ellipsoid_transform(A0):
    """J = A0^{-1/2} and the ellipsoid/ball sandwich data for the center."""
    a = np.asarray(A0, dtype=float)
    if a.shape != (2, 2) or np.abs(a - a.T).max() > 1e-12:
        raise FrequencyError("matrix must be symmetric 2x2")
    lam, vec = np.linalg.eigh(a)
    if np.any(lam <= 0):
        raise FrequencyError("matrix is not symmetric positive definite")
    J = (vec / np.sqrt(lam)) @ vec.T
    K = float(max(lam.max(), 1.0 / lam.min()))
    return EllipsoidMap(A0=a, J=J, eigenvalues=lam, K=K)
