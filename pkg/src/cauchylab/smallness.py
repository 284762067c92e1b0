"""Propagation of smallness: ball chains, cone chains, explicit moduli.

The quantitative content of conditional stability is carried by three
constructions.  A chain of balls with centers 2*r1 apart moves smallness
from a source ball to any interior set G with dist(G, dOmega) >= h, at the
price of a Holder exponent delta = alpha^N decaying with the chain length N.
Near the boundary the chain is replaced by a self-similar sequence of balls
tangent to a Lipschitz cone, which converts the exponent into a power of the
depth and, after optimizing the depth, into a single logarithmic modulus.
Letting h itself shrink turns the logarithm into a log-log modulus.

Per-step constants are measured on the actual discrete solution and then
frozen into the certified bound; every report carries the measured norm next
to the bound, so each run is a falsifiable experiment rather than a proof.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage as ndi

from .geometry import (
    GeometryError,
    GridMask,
    connectivity_threshold,
    geodesic_field,
    geodesic_path,
    interior_envelope,
)
from .pde import l2_on_ball, norm_h1, norm_l2

__all__ = [
    "SmallnessError",
    "ChainPlan",
    "ConeChainPlan",
    "ExponentBudget",
    "StabilityReport",
    "PhiReport",
    "radii_from_h",
    "build_chain",
    "chain_to_csv",
    "source_smallness",
    "interior_propagation",
    "cone_chain",
    "global_propagation",
    "phi_minimize",
    "loglog_modulus",
    "fit_log_rate",
    "fit_loglog_rate",
]


class SmallnessError(Exception):
    """Chain construction or stability-budget parameters are inadmissible."""


# ---------------------------------------------------------------------------
# radii schedule
# ---------------------------------------------------------------------------


def radii_from_h(h, K=1.0):
    """Ball radii (r1, r2, r3) = (h/(30K), h/(10K), h/2) for the chain at scale h.

    The schedule keeps B_{r1}(x_{k+1}) inside B_{r2}(x_k) for steps of length
    2*r1 (since r2 = 3*r1) and keeps B_{r3} a fixed factor inside the h-collar.
    """
    if not h > 0:
        raise SmallnessError("chain scale h must be positive")
    if not K >= 1:
        raise SmallnessError("ellipticity constant K must be at least 1")
    r1 = h / (30.0 * K)
    r2 = h / (10.0 * K)
    r3 = h / 2.0
    assert abs(r2 - r3 / (5.0 * K)) <= 1e-15 * r2
    assert abs(r1 - r2 / 3.0) <= 1e-15 * r1
    return r1, r2, r3


# ---------------------------------------------------------------------------
# ball chains
# ---------------------------------------------------------------------------


@dataclass
class ChainPlan:
    """Ball chain x_0, ..., x_N with |x_{k+1} - x_k| = 2 r1 until the target.

    centers has N + 1 rows; centers[0] is the source point and centers[N] is
    the target itself (the last step may be shorter than 2 r1).  The balls
    B_{r1}(x_k), k < N, are pairwise disjoint by the last-crossing step rule.
    """

    centers: np.ndarray
    radii: tuple
    x0: np.ndarray
    y: np.ndarray
    r0: float = None
    mask: GridMask = field(default=None, repr=False)
    path_length: float = 0.0

    @property
    def r1(self):
        return self.radii[0]

    @property
    def N(self):
        return len(self.centers) - 1

    def step_lengths(self):
        return np.linalg.norm(np.diff(self.centers, axis=0), axis=1)

    def verify(self, tol=1e-9):
        """Per-ball invariant flags plus worst-case defects.

        in_mask is informational: the geodesic smoothing samples segments at
        half the cell pitch, so a center may sit a sliver outside the raster
        while staying inside the continuum enlargement of the target set.
        """
        n = self.N
        steps = self.step_lengths()
        two = 2.0 * self.r1
        r1_ok = np.ones(n + 1, dtype=bool)
        for k in range(1, n):
            r1_ok[k] = abs(steps[k - 1] - two) <= tol * two
        if n >= 1:
            r1_ok[n] = steps[n - 1] <= two * (1.0 + tol)
        disjoint_ok = np.ones(n + 1, dtype=bool)
        if n >= 2:
            inner = self.centers[:n]
            d = np.linalg.norm(inner[:, None, :] - inner[None, :, :], axis=-1)
            d[np.arange(n), np.arange(n)] = np.inf
            disjoint_ok[:n] = d.min(axis=1) >= two * (1.0 - tol)
        in_mask = np.ones(n + 1, dtype=bool)
        if self.mask is not None:
            in_mask = self.mask.contains_points(self.centers)
        step_defect = 0.0
        if n >= 2:
            step_defect = float(np.max(np.abs(steps[: n - 1] - two)))
        return {
            "r1_ok": r1_ok,
            "disjoint_ok": disjoint_ok,
            "in_mask": in_mask,
            "max_step_defect": step_defect,
            "passed": bool(r1_ok.all() and disjoint_ok.all()),
        }


def _last_crossing(pts, center, R):
    """Point on the last crossing of the polyline with the circle |x - c| = R.

    Scans segments from the end; the first hit found is the global maximum of
    the path parameter.  The returned point is snapped radially onto the
    circle so the step length is exact to rounding.
    """
    c = np.asarray(center, dtype=float)
    for i in range(len(pts) - 2, -1, -1):
        a, b = pts[i], pts[i + 1]
        d = b - a
        aa = float(d @ d)
        if aa <= 0.0:
            continue
        w = a - c
        bb = 2.0 * float(w @ d)
        cc = float(w @ w) - R * R
        disc = bb * bb - 4.0 * aa * cc
        if disc < 0.0:
            continue
        sq = math.sqrt(disc)
        for t in ((-bb + sq) / (2.0 * aa), (-bb - sq) / (2.0 * aa)):
            if -1e-12 <= t <= 1.0 + 1e-12:
                p = a + min(max(t, 0.0), 1.0) * d
                v = p - c
                nv = float(np.linalg.norm(v))
                if nv > 0.0:
                    return c + (R / nv) * v
        # fall through to earlier segments when both roots are out of range
    return None


def build_chain(mask, x0, y, r1, r2=None, r3=None, r0=None):
    """Ball chain from x0 to y along the mask geodesic, last-crossing rule.

    Each new center is the last point of the geodesic at distance exactly
    2*r1 from the previous one; the walk stops as soon as the target is
    within 2*r1 and appends the target itself.  Working on the shortest path
    minimizes the chain length N, hence maximizes the exponent alpha^N.
    """
    if not r1 > 0:
        raise SmallnessError("chain radius r1 must be positive")
    x0 = np.asarray(x0, dtype=float).reshape(2)
    y = np.asarray(y, dtype=float).reshape(2)
    if not mask.contains_points(x0)[0]:
        raise SmallnessError("source point lies outside the propagation domain")
    if not mask.contains_points(y)[0]:
        raise SmallnessError("target point lies outside the propagation domain")
    try:
        path = geodesic_path(mask, x0, y)
    except GeometryError as exc:
        raise SmallnessError(f"propagation domain is disconnected: {exc}") from exc
    radii = (r1, 3.0 * r1 if r2 is None else r2, 15.0 * r1 if r3 is None else r3)
    plan = _walk_chain(path, x0, y, radii, r0, mask)
    # disjoint-ball volume bound: N balls of radius r1 fit in the fattened mask
    rad = int(math.ceil(r1 / mask.spacing + 0.75))
    gy, gx = np.ogrid[-rad : rad + 1, -rad : rad + 1]
    foot = gx * gx + gy * gy <= rad * rad
    cap = float(ndi.binary_dilation(mask.cells, structure=foot).sum())
    cap *= mask.spacing**2
    if plan.N > 1.25 * cap / (math.pi * r1 * r1) + 2.0:
        raise SmallnessError("chain length exceeds the disjoint-ball volume bound")
    return plan


def chain_to_csv(plan, path, step_Q=None):
    """Rows `k,x,y,r1_ok,disjoint_ok,step_Q`; step_Q[k] is the factor into ball k."""
    checks = plan.verify()
    lines = ["k,x,y,r1_ok,disjoint_ok,step_Q"]
    for k, (x, yv) in enumerate(plan.centers):
        q = float("nan") if step_Q is None or k >= len(step_Q) else float(step_Q[k])
        lines.append(
            "{},{!r},{!r},{},{},{!r}".format(
                k,
                float(x),
                float(yv),
                int(checks["r1_ok"][k]),
                int(checks["disjoint_ok"][k]),
                q,
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# exponent bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExponentBudget:
    """All constants of a certified bound C (eta+eps)^delta (E+eps)^(1-delta).

    C = C1 (|Omega|/h^n)^(1/2) and delta is the realized alpha^N, never below
    the volume floor alpha^(C2 |Omega|/h^n) that the disjoint-ball count
    guarantees.  The optional fields carry the boundary-layer exponents when
    the budget belongs to a global run.
    """

    alpha: float
    C1: float
    C2: float
    area: float
    h: float
    n: int = 2
    delta: float = None
    Q: float = None
    p: float = None
    theta: float = None
    sigma: float = None
    l: float = None
    mu: float = None
    tau0: float = None
    zeta: float = None
    gamma: float = None
    S: float = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise SmallnessError("per-step exponent alpha must lie in (0, 1)")
        if not (self.C1 > 0 and self.C2 > 0):
            raise SmallnessError("budget constants C1, C2 must be positive")
        if not (self.area > 0 and self.h > 0):
            raise SmallnessError("domain measure and scale h must be positive")
        if self.area < self.h**self.n:
            raise SmallnessError("scale h exceeds the domain measure: C < C1")
        if self.delta is None:
            object.__setattr__(self, "delta", self.delta_floor)
        if not 0.0 < self.delta < 1.0:
            raise SmallnessError("Holder exponent delta must lie in (0, 1)")
        if self.delta < self.delta_floor - 1e-15:
            raise SmallnessError("delta fell below the volume floor alpha^(C2|Omega|/h^n)")

    @property
    def C(self):
        return self.C1 * math.sqrt(self.area / self.h**self.n)

    @property
    def delta_floor(self):
        # computed in log space; may underflow to 0 for very small h
        return math.exp(self.C2 * self.area / self.h**self.n * math.log(self.alpha))


@dataclass
class StabilityReport:
    """Measured norm next to the certified bound, with all exponents realized."""

    mode: str
    measured: float
    bound: float
    delta: float
    passed: bool
    eta: float
    E: float
    eps: float
    mu: float = float("nan")
    J: int = 0
    plan: ChainPlan = None
    cone: object = None
    budget: ExponentBudget = None
    ball_norms: np.ndarray = None
    step_Q: np.ndarray = None
    notes: list = field(default_factory=list)

    def result_line(self):
        verdict = "pass" if self.passed else "fail"
        return "RESULT {} measured={!r} bound={!r} delta={!r}".format(
            verdict, float(self.measured), float(self.bound), float(self.delta)
        )

    def to_csv(self, path):
        if self.plan is None:
            raise SmallnessError("report carries no chain plan to export")
        chain_to_csv(self.plan, path, self.step_Q)


def source_smallness(src, sol, rho0=1.0, region=None):
    """eps = rho0^2 ||f|| + rho0 ||F|| in normalized L2 over the valid cells."""
    cells = sol.valid_cells()
    centers = sol.grid.cell_centers()
    if region is not None:
        if hasattr(region, "contains_points"):
            cells = cells & region.contains_points(centers)
        else:
            cells = cells & region.contains(centers)
    h = sol.grid.h
    fv = src.f_at(centers)
    Fv = src.F_at(centers)
    nf = math.sqrt(float(np.sum(fv[cells] ** 2)) * h * h) / rho0
    nF = math.sqrt(float(np.sum(Fv[cells] ** 2)) * h * h) / rho0
    return rho0**2 * nf + rho0 * nF


# ---------------------------------------------------------------------------
# interior propagation
# ---------------------------------------------------------------------------


def _disc_footprint(radius_cells):
    rad = int(math.ceil(radius_cells))
    gy, gx = np.ogrid[-rad : rad + 1, -rad : rad + 1]
    return gx * gx + gy * gy <= radius_cells * radius_cells


def _tessellation(G, r1, dist):
    """Square tessellation of side 2 r1/sqrt(2) clipped to the mask.

    Returns (J, centers, dmin) where dmin[j] is the smallest geodesic
    distance among the cells of square j; each square sits inside the ball
    B_{r1} around its center, so a chain reaching the nearest cell reaches
    the center after at most one extra radius r1 of path.
    """
    side = 2.0 * r1 / math.sqrt(2.0)
    xs, ys = G.cell_centers()
    ii, jj = np.nonzero(G.cells)
    px = np.floor((xs[jj] - G.x0) / side).astype(int)
    py = np.floor((ys[ii] - G.y0) / side).astype(int)
    keys, inv = np.unique(np.stack([py, px], axis=1), axis=0, return_inverse=True)
    dmin = np.full(len(keys), np.inf)
    np.minimum.at(dmin, inv, dist[ii, jj])
    centers = np.stack(
        [G.x0 + (keys[:, 1] + 0.5) * side, G.y0 + (keys[:, 0] + 0.5) * side], axis=1
    )
    return len(keys), centers, dmin


def interior_propagation(
    u,
    src,
    x0,
    r0,
    G,
    h,
    *,
    domain,
    E0=None,
    eta=None,
    eps=None,
    K=1.0,
    alpha=None,
    Q=None,
    rho0=1.0,
    Q_cap=10.0,
):
    """Propagate smallness from B_{r0}(x0) to the interior set G at scale h.

    Builds the longest ball chain needed to reach the square tessellation
    covering G, measures the per-step factors m_{k+1}/m_k^alpha on it, and
    returns the measured ||u||_{L2(G)} next to the certified-form bound
    C (eta+eps)^delta (E0+eps)^(1-delta) with delta = alpha^N.
    """
    x0 = np.asarray(x0, dtype=float).reshape(2)
    if not (r0 > 0 and h > 0):
        raise SmallnessError("source radius r0 and scale h must be positive")
    if h > r0 / 2.0 + 1e-12:
        raise SmallnessError("scale h must not exceed r0/2")
    if h > 2.0 * rho0:
        raise SmallnessError("scale h must not exceed 2 rho0")
    if G.count() == 0:
        raise SmallnessError("target set G is empty at this raster")
    if ndi.label(G.cells, structure=np.ones((3, 3), dtype=int))[1] != 1:
        raise SmallnessError("target set G must be connected")
    notes = []
    passed = True
    spacing = G.spacing
    xs, ys = G.cell_centers()
    ii, jj = np.nonzero(G.cells)
    gpts = np.column_stack([xs[jj], ys[ii]])
    mind = float(domain.boundary_distance(gpts).min())
    if mind < h - 0.75 * spacing:
        raise SmallnessError("target set G comes closer than h to the boundary")
    rr = max(r0 / 2.0 - 0.75 * spacing, 0.0)
    th = np.linspace(0.0, 2.0 * math.pi, 17)[:-1]
    probe = x0[None, :] + rr * np.column_stack([np.cos(th), np.sin(th)])
    if not (G.contains_points(x0)[0] and G.contains_points(probe).all()):
        raise SmallnessError("source ball B_{r0/2}(x0) is not inside G")

    r1, r2, r3 = radii_from_h(h, K)
    if alpha is None:
        alpha = math.log(5.0 * K) / math.log(15.0 * K)
    if eps is None:
        eps = source_smallness(src, u, rho0)
    eta_meas = l2_on_ball(u, x0, r0, rho0)
    if eta is None:
        eta = eta_meas
    elif eta_meas > eta * (1.0 + 1e-9) + 1e-300:
        notes.append(f"measured ball norm {eta_meas:.3e} exceeds the stated eta")
        passed = False
    E_meas = norm_l2(u, rho0)
    if E0 is None:
        E0 = E_meas
    elif E_meas > E0 * (1.0 + 1e-9) + 1e-300:
        notes.append(f"measured global norm {E_meas:.3e} exceeds the stated E0")
        passed = False

    enlarged = GridMask(
        G.x0,
        G.y0,
        spacing,
        ndi.binary_dilation(G.cells, structure=_disc_footprint(r1 / spacing + 0.75)),
    )
    try:
        fld = geodesic_field(enlarged, x0)
    except GeometryError as exc:
        raise SmallnessError(f"propagation domain is disconnected: {exc}") from exc
    if not np.isfinite(fld[0][G.cells]).all():
        raise SmallnessError("propagation domain is disconnected: unreachable cells in G")
    J, centers, dmin = _tessellation(G, r1, fld[0])
    # every step of the walk consumes at least 2 r1 of arclength, so the
    # chain to square j has at most floor((L_j + r1)/(2 r1)) + 1 steps
    caps = np.floor((dmin + r1) / (2.0 * r1)).astype(int) + 1
    far = int(np.argmax(dmin))
    wj = centers[far]
    if not enlarged.contains_points(wj)[0]:
        k = np.argmin(np.hypot(gpts[:, 0] - wj[0], gpts[:, 1] - wj[1]))
        notes.append("farthest tessellation center snapped onto the mask")
        wj = gpts[k]
    try:
        path = geodesic_path(enlarged, x0, wj, field=fld)
    except GeometryError as exc:
        raise SmallnessError(f"propagation domain is disconnected: {exc}") from exc
    plan = _walk_chain(path, x0, wj, (r1, r2, r3), r0, enlarged)
    N = max(int(caps.max()), plan.N)
    if float(domain.boundary_distance(plan.centers).min()) < r3:
        notes.append("a chain ball B_{r3} leaves the domain")
        passed = False

    denom = E0 + eps
    Np = plan.N
    m = np.zeros(Np + 1)
    if denom > 0.0:
        for k in range(Np + 1):
            m[k] = (l2_on_ball(u, plan.centers[k], r1, rho0) + eps) / denom
    if r1 < spacing:
        notes.append("chain radius r1 below the grid spacing: ball norms undersampled")
    step_Q = np.full(Np + 1, np.nan)
    for k in range(1, Np + 1):
        if m[k - 1] > 0.0:
            step_Q[k] = m[k] / m[k - 1] ** alpha
    finite = step_Q[np.isfinite(step_Q)]
    Q_used = Q if Q is not None else (max(1.0, float(finite.max())) if len(finite) else 1.0)
    bad = np.nonzero(step_Q > Q_cap)[0]
    if len(bad):
        k = int(bad[0])
        notes.append(
            f"chain ball {k}: per-step factor {step_Q[k]:.4g} exceeds the cap {Q_cap:g}"
        )
        passed = False

    area = domain.area()
    delta = alpha**N
    budget = ExponentBudget(
        alpha=alpha,
        C1=math.sqrt(J * h * h / area) * Q_used ** (1.0 / (1.0 - alpha)),
        C2=900.0 * K * K / math.pi,
        area=area,
        h=h,
        delta=delta,
        Q=Q_used,
    )
    if N > budget.C2 * area / h**2:
        notes.append("chain length exceeds the volume bound C2 |Omega| / h^2")
        passed = False
    measured = norm_l2(u, rho0, region=G)
    bound = budget.C * (eta + eps) ** delta * denom ** (1.0 - delta)
    if measured > bound * (1.0 + 1e-9):
        notes.append("measured norm exceeds the certified bound")
        passed = False
    return StabilityReport(
        mode="interior",
        measured=measured,
        bound=bound,
        delta=delta,
        passed=passed,
        eta=eta,
        E=E0,
        eps=eps,
        J=J,
        plan=plan,
        budget=budget,
        ball_norms=m,
        step_Q=step_Q,
        notes=notes,
    )


def _walk_chain(path, x0, y, radii, r0, mask):
    """Chain walk along an already computed geodesic path."""
    r1 = radii[0]
    two = 2.0 * r1
    centers = [np.asarray(x0, dtype=float)]
    limit = int(path.length / two) + 8
    while np.linalg.norm(centers[-1] - y) > two:
        if len(centers) > limit:
            raise SmallnessError("chain walk failed to make progress")
        nxt = _last_crossing(path.points, centers[-1], two)
        if nxt is None:
            raise SmallnessError("chain walk lost the path")
        centers.append(nxt)
    centers.append(np.asarray(y, dtype=float))
    return ChainPlan(
        centers=np.asarray(centers),
        radii=radii,
        x0=np.asarray(x0, dtype=float),
        y=np.asarray(y, dtype=float),
        r0=r0,
        mask=mask,
        path_length=path.length,
    )


# ---------------------------------------------------------------------------
# cone chains at the boundary
# ---------------------------------------------------------------------------


@dataclass
class ConeChainPlan:
    """Self-similar balls B_{s_k}(y_k) tangent to a Lipschitz cone at its vertex.

    y_k sits on the axis at height t_k = q^k t0 with radius s_k = q^k s0;
    the ratio q = (1-s)/(1+s), s = s0/t0 = sin(theta), makes consecutive
    balls tangent to each other and all of them tangent to the cone surface.
    """

    w: np.ndarray
    axis: np.ndarray
    M0: float
    rho0: float
    h1: float
    t0: float
    s0: float
    s: float
    q: float
    t_k: np.ndarray
    s_k: np.ndarray
    centers: np.ndarray
    resolution: float

    @property
    def n_balls(self):
        return len(self.s_k)

    @property
    def identity_residual(self):
        lhs = 4.0 * self.s0 + self.h1
        rhs = self.t0 / math.sqrt(1.0 + self.M0**2)
        return abs(lhs - rhs)

    @property
    def geometric_sum(self):
        return 2.0 * self.s0 / (1.0 - self.q)

    def cone_distance(self, pts):
        """Signed distance to the cone surface; positive inside the cone."""
        pts = np.asarray(pts, dtype=float)
        v = pts - self.w
        a = v @ self.axis
        rho = np.linalg.norm(v - a[..., None] * self.axis, axis=-1)
        sin_t = self.s
        cos_t = math.sqrt(1.0 - self.s**2)
        return a * sin_t - rho * cos_t

    def contains(self, pts, tol=1e-12):
        return self.cone_distance(pts) >= -tol

    def tangency_residuals(self):
        """(cone tangency, mutual tangency) worst-case defects."""
        cone = float(np.max(np.abs(self.cone_distance(self.centers) - self.s_k)))
        mutual = 0.0
        if self.n_balls > 1:
            gaps = np.linalg.norm(np.diff(self.centers, axis=0), axis=1)
            mutual = float(np.max(np.abs(gaps - (self.s_k[:-1] + self.s_k[1:]))))
        return cone, mutual

    def decay_exponent(self, alpha):
        """D = log(alpha)/log(q): depth r enters the bound as (r/t0)^D."""
        if not 0.0 < alpha < 1.0:
            raise SmallnessError("per-step exponent alpha must lie in (0, 1)")
        return math.log(alpha) / math.log(self.q)


def cone_chain(w, axis, M0, rho0, h1, resolution=None):
    """Self-similar ball chain descending toward the vertex w along the axis.

    t0 = (sqrt(1+M0^2)/(1+sqrt(1+M0^2))) (rho0 - M0 h1) and
    s0 = ((rho0 - M0 h1)/(1+sqrt(1+M0^2)) - h1)/4 fix the first ball; balls
    are emitted until their radius drops below the target resolution.
    """
    if not (rho0 > 0 and h1 > 0):
        raise SmallnessError("rho0 and h1 must be positive")
    if not M0 >= 1:
        raise SmallnessError("Lipschitz constant M0 must be at least 1")
    w = np.asarray(w, dtype=float).reshape(2)
    axis = np.asarray(axis, dtype=float).reshape(2)
    na = float(np.linalg.norm(axis))
    if na <= 0.0:
        raise SmallnessError("cone axis must be a nonzero vector")
    axis = axis / na
    root = math.sqrt(1.0 + M0 * M0)
    t0 = (root / (1.0 + root)) * (rho0 - M0 * h1)
    s0 = ((rho0 - M0 * h1) / (1.0 + root) - h1) / 4.0
    if s0 <= 0.0:
        raise SmallnessError("h1 too large: the tangent ball radius s0 is not positive")
    h0 = connectivity_threshold(rho0, M0).h0
    if h1 >= h0 * (1.0 + 1e-12):
        raise SmallnessError("h1 must stay below the connectivity threshold h0")
    s = s0 / t0
    q = (1.0 - s) / (1.0 + s)
    if resolution is None:
        resolution = s0 * 1e-3
    if not 0.0 < resolution:
        raise SmallnessError("target resolution must be positive")
    t_list, s_list = [t0], [s0]
    while s_list[-1] >= resolution:
        t_list.append(q * t_list[-1])
        s_list.append(q * s_list[-1])
    t_k = np.asarray(t_list)
    s_k = np.asarray(s_list)
    centers = w[None, :] + t_k[:, None] * axis[None, :]
    plan = ConeChainPlan(
        w=w,
        axis=axis,
        M0=M0,
        rho0=rho0,
        h1=h1,
        t0=t0,
        s0=s0,
        s=s,
        q=q,
        t_k=t_k,
        s_k=s_k,
        centers=centers,
        resolution=resolution,
    )
    if plan.identity_residual > 1e-12 * rho0:
        raise SmallnessError("cone construction identity 4 s0 + h1 = t0/sqrt(1+M0^2) failed")
    return plan


# ---------------------------------------------------------------------------
# modulus minimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhiReport:
    """Closed-form and brute-force minima of Phi(tau) = tau^theta + tau^-sigma zeta^tau.

    bound is the presentation form 2 (1/log(1/zeta))^mu (or the endpoint value
    when tau* does not fit below tau0); value is Phi evaluated exactly at the
    closed-form tau, always between the brute minimum and the bound.
    """

    mu: float
    bound: float
    value: float
    brute: float
    l: float
    tau_closed: float
    tau_brute: float
    branch: str


def phi_minimize(theta, sigma, zeta, tau0=1.0):
    """Minimize Phi(tau) = tau^theta + tau^(-sigma) zeta^tau over (0, tau0].

    The closed-form choice tau* = (1/log(1/zeta))^l with l = 1/(1+theta+sigma)
    gives the bound 2 (1/log(1/zeta))^mu, mu = theta l, valid when tau* fits
    below tau0; otherwise the endpoint value Phi(tau0) is reported.  A
    10^4-point log-grid minimum is returned alongside for comparison.
    """
    if not (theta > 0 and sigma > 0):
        raise SmallnessError("exponents theta and sigma must be positive")
    if not 0.0 < zeta < 1.0:
        raise SmallnessError("smallness ratio zeta must lie in (0, 1)")
    if not 0.0 < tau0 <= 1.0:
        raise SmallnessError("depth cap tau0 must lie in (0, 1]")
    l = 1.0 / (1.0 + theta + sigma)
    mu = theta * l
    Lz = math.log(1.0 / zeta)
    tau_star = Lz ** (-l)
    grid = np.geomspace(tau0 * 1e-12, tau0, 10000)
    second = np.exp(np.clip(-sigma * np.log(grid) + grid * math.log(zeta), -745.0, 709.0))
    phi = grid**theta + second
    kmin = int(np.argmin(phi))
    brute = float(phi[kmin])
    if tau_star <= tau0:
        bound = 2.0 * Lz ** (-mu)
        branch = "log"
        tau_closed = tau_star
    else:
        branch = "endpoint"
        tau_closed = tau0
    arg = -sigma * math.log(tau_closed) + tau_closed * math.log(zeta)
    value = tau_closed**theta + math.exp(min(arg, 709.0))
    if branch == "endpoint":
        bound = value
    return PhiReport(
        mu=mu,
        bound=bound,
        value=value,
        brute=brute,
        l=l,
        tau_closed=tau_closed,
        tau_brute=float(grid[kmin]),
        branch=branch,
    )


# ---------------------------------------------------------------------------
# global propagation
# ---------------------------------------------------------------------------


def global_propagation(
    u,
    src,
    x0,
    r0,
    domain,
    E,
    *,
    eta=None,
    eps=None,
    K=1.0,
    M0=1.0,
    rho0=1.0,
    p=4.0,
    alpha=None,
    Q=None,
    Q_cap=10.0,
):
    """Propagate smallness up to the boundary: logarithmic modulus on all of Omega.

    Runs the interior chain on the collar complement Omega_{h1}, converts the
    boundary layer into cone chains with ratio q and per-step exponent
    alpha_cone = log(4/3)/log(4), and optimizes the layer depth through
    phi_minimize.  The reported bound is the assembled two-term estimate; its
    modulus form C (E+eps) (log((E+eps)/(eta+eps)))^(-mu) has the realized
    constant recorded in the notes.
    """
    x0 = np.asarray(x0, dtype=float).reshape(2)
    notes = []
    passed = True
    if eps is None:
        eps = source_smallness(src, u, rho0)
    if not E > 0:
        raise SmallnessError("energy level E must be positive")
    E_meas = norm_h1(u, rho0)
    if E_meas > E * (1.0 + 1e-9) + 1e-300:
        notes.append(f"measured H1 norm {E_meas:.3e} exceeds the stated E")
        passed = False
    h0 = connectivity_threshold(rho0, M0).h0
    h1 = min(h0 / 2.0, r0 / 2.0, 2.0 * rho0)
    Gmask = interior_envelope(domain, h1, spacing=u.grid.h)
    if Gmask.count() == 0:
        raise SmallnessError("interior envelope Omega_{h1} is empty at this raster")
    interior = interior_propagation(
        u,
        src,
        x0,
        r0,
        Gmask,
        h1,
        domain=domain,
        E0=E,
        eta=eta,
        eps=eps,
        K=K,
        alpha=alpha,
        Q=Q,
        rho0=rho0,
        Q_cap=Q_cap,
    )
    passed = interior.passed
    notes.extend(interior.notes)

    # representative cone: the exponents depend only on (rho0, M0, h1)
    cone = cone_chain((0.0, 0.0), (0.0, 1.0), M0, rho0, h1, resolution=h1 * 1e-2)
    alpha_cone = math.log(4.0 / 3.0) / math.log(4.0)
    D = cone.decay_exponent(alpha_cone)
    theta = (0.5 - 1.0 / p) / D
    sigma = 2.0 / (2.0 * D)
    gamma = alpha_cone * interior.delta
    tau0 = (h1 / cone.t0) ** D
    measured = norm_l2(u, rho0)
    denom = E + eps
    ratio = (interior.eta + eps) / denom if denom > 0 else 1.0
    if ratio >= 1.0 or ratio <= 0.0:
        mu = theta / (1.0 + theta + sigma)
        bound = math.inf
        notes.append("degenerate data level eta >= E: modulus bound is infinite")
        budget = replace(
            interior.budget,
            p=p,
            theta=theta,
            sigma=sigma,
            l=1.0 / (1.0 + theta + sigma),
            mu=mu,
            tau0=tau0,
            zeta=None,
            gamma=gamma,
        )
        return StabilityReport(
            mode="global",
            measured=measured,
            bound=bound,
            delta=interior.delta,
            passed=passed and measured <= bound,
            eta=interior.eta,
            E=E,
            eps=eps,
            mu=mu,
            J=interior.J,
            plan=interior.plan,
            cone=cone,
            budget=budget,
            ball_norms=interior.ball_norms,
            step_Q=interior.step_Q,
            notes=notes,
        )
    zeta = ratio**gamma
    zeta = min(max(zeta, 1e-300), 1.0 - 1e-16)
    phi = phi_minimize(theta, sigma, zeta, tau0)
    C_layer = max(interior.budget.C, 1.0)
    bound = interior.bound + denom * C_layer * phi.bound
    log_ratio = math.log(1.0 / ratio)
    C_mod = bound / (denom * log_ratio ** (-phi.mu))
    notes.append(f"phi branch {phi.branch}; modulus-form constant {C_mod:.6g}")
    if measured > bound * (1.0 + 1e-9):
        notes.append("measured norm exceeds the assembled bound")
        passed = False
    budget = replace(
        interior.budget,
        p=p,
        theta=theta,
        sigma=sigma,
        l=phi.l,
        mu=phi.mu,
        tau0=tau0,
        zeta=zeta,
        gamma=gamma,
    )
    return StabilityReport(
        mode="global",
        measured=measured,
        bound=bound,
        delta=interior.delta,
        passed=passed,
        eta=interior.eta,
        E=E,
        eps=eps,
        mu=phi.mu,
        J=interior.J,
        plan=interior.plan,
        cone=cone,
        budget=budget,
        ball_norms=interior.ball_norms,
        step_Q=interior.step_Q,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# log-log modulus
# ---------------------------------------------------------------------------


def loglog_modulus(Q, theta, p, alpha, C2, area, s0, tau=None, *, log_tau=None, rho0=1.0):
    """inf over s in (0, s0] of s^(-1/2) tau^(alpha^(C2/s)) + coef s^D.

    s stands for h^n/|Omega|; the first term is the chain bound with its
    exponent floor alpha^(C2/s) and the second the Sobolev layer term with
    D = (theta/n)(1/2 - 1/p) and coef = Q^(1/2-1/p) (|Omega|/rho0^n)^D.
    tau may be passed in log space to reach values like e^(-1000).
    """
    if not (Q > 0 and theta > 0 and p > 2):
        raise SmallnessError("need Q > 0, theta > 0 and integrability p > 2")
    if not 0.0 < alpha < 1.0:
        raise SmallnessError("per-step exponent alpha must lie in (0, 1)")
    if not (C2 > 0 and area > 0):
        raise SmallnessError("C2 and the domain measure must be positive")
    if not 0.0 < s0 <= 1.0:
        raise SmallnessError("scale cap s0 must lie in (0, 1]")
    if (tau is None) == (log_tau is None):
        raise SmallnessError("pass exactly one of tau and log_tau")
    if tau is not None:
        if not 0.0 < tau < math.exp(-1.0):
            raise SmallnessError("tau must lie in (0, 1/e)")
        log_tau = math.log(tau)
    elif not log_tau < -1.0:
        raise SmallnessError("log tau must lie below -1")
    D = (theta / 2.0) * (0.5 - 1.0 / p)
    coef = Q ** (0.5 - 1.0 / p) * (area / rho0**2) ** D
    s = np.geomspace(s0 * 1e-10, s0, 10000)
    expo = (C2 / s) * math.log(alpha)
    delta = np.exp(np.clip(expo, -745.0, 0.0))
    first = np.exp(np.clip(-0.5 * np.log(s) + delta * log_tau, -745.0, 709.0))
    return float(np.min(first + coef * s**D))


# ---------------------------------------------------------------------------
# empirical rate fits
# ---------------------------------------------------------------------------


def fit_log_rate(etas, values):
    """OLS fit values ~ C (log 1/eta)^(-mu): returns (mu_hat, C, corr)."""
    etas = np.asarray(etas, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(etas) < 2 or len(etas) != len(values):
        raise SmallnessError("need at least two (eta, value) pairs")
    if not ((etas > 0).all() and (etas < 1).all() and (values > 0).all()):
        raise SmallnessError("fit needs eta in (0, 1) and positive values")
    x = np.log(np.log(1.0 / etas))
    yv = np.log(values)
    slope, intercept = np.polyfit(x, yv, 1)
    corr = float(np.corrcoef(x, yv)[0, 1])
    return float(-slope), float(math.exp(intercept)), corr


def fit_loglog_rate(log_taus, values):
    """OLS fit values ~ C (log |log tau|)^(-S): returns (S_hat, C, corr)."""
    log_taus = np.asarray(log_taus, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(log_taus) < 2 or len(log_taus) != len(values):
        raise SmallnessError("need at least two (log tau, value) pairs")
    if not ((log_taus < -1).all() and (values > 0).all()):
        raise SmallnessError("fit needs log tau < -1 and positive values")
    x = np.log(np.log(-log_taus))
    yv = np.log(values)
    slope, intercept = np.polyfit(x, yv, 1)
    corr = float(np.corrcoef(x, yv)[0, 1])
    return float(-slope), float(math.exp(intercept)), corr
