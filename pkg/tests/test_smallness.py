"""Chain construction, cone geometry, and modulus minimization tests."""

import math

import numpy as np
import pytest

from cauchylab import geometry as geo
from cauchylab import pde
from cauchylab.smallness import (
    ChainPlan,
    ExponentBudget,
    SmallnessError,
    build_chain,
    chain_to_csv,
    cone_chain,
    fit_log_rate,
    fit_loglog_rate,
    global_propagation,
    interior_propagation,
    loglog_modulus,
    phi_minimize,
    radii_from_h,
    source_smallness,
)

RNG = np.random.default_rng


def full_mask(x0, y0, spacing, ny, nx):
    return geo.GridMask(x0, y0, spacing, np.ones((ny, nx), dtype=bool))


# ---------------------------------------------------------------------------
# radii schedule
# ---------------------------------------------------------------------------


def test_radii_unit_scale():
    r1, r2, r3 = radii_from_h(1.0, 1.0)
    assert r1 == pytest.approx(1.0 / 30.0, rel=1e-15)
    assert r2 == pytest.approx(0.1, rel=1e-15)
    assert r3 == pytest.approx(0.5, rel=1e-15)


def test_radii_scaled_ellipticity():
    assert radii_from_h(0.6, 2.0) == pytest.approx((0.01, 0.03, 0.3), rel=1e-15)


def test_radii_homogeneity():
    base = np.array(radii_from_h(0.37, 1.4))
    double = np.array(radii_from_h(0.74, 1.4))
    assert np.allclose(double, 2.0 * base, rtol=1e-15)


def test_radii_validation():
    with pytest.raises(SmallnessError):
        radii_from_h(0.0, 1.0)
    with pytest.raises(SmallnessError):
        radii_from_h(1.0, 0.5)


# ---------------------------------------------------------------------------
# ball chains
# ---------------------------------------------------------------------------


def test_chain_straight_segment():
    mask = full_mask(-0.05, -0.125, 0.025, 10, 45)
    plan = build_chain(mask, (0.0, 0.0), (1.0, 0.0), 0.1)
    assert plan.N == 5
    assert np.allclose(plan.centers[:, 0], [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-12)
    assert np.allclose(plan.centers[:, 1], 0.0, atol=1e-12)
    checks = plan.verify()
    assert checks["passed"]
    assert checks["max_step_defect"] <= 1e-12


def test_chain_partial_last_step():
    # steps of 0.19 from 0: stop at 0.95 where the remaining gap is 0.05
    mask = full_mask(-0.05, -0.125, 0.025, 10, 45)
    plan = build_chain(mask, (0.0, 0.0), (1.0, 0.0), 0.095)
    assert plan.N == 6
    assert np.allclose(plan.centers[:5, 0], 0.19 * np.arange(5), atol=1e-12)
    assert plan.step_lengths()[-1] == pytest.approx(0.05, abs=1e-12)


def test_chain_immediate_stop():
    mask = full_mask(-0.05, -0.125, 0.025, 10, 45)
    plan = build_chain(mask, (0.0, 0.0), (0.15, 0.0), 0.1)
    assert plan.N == 1
    assert np.allclose(plan.centers, [[0.0, 0.0], [0.15, 0.0]], atol=1e-12)


def _reference_walk(path, x0, y, r1):
    """Independent last-crossing walker: dense sampling plus bisection."""
    pts = path.points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(seg)])

    def at(s):
        k = min(np.searchsorted(t, s, side="right"), len(seg))
        k = max(k - 1, 0)
        if seg[k] == 0.0:
            return pts[k]
        lam = (s - t[k]) / seg[k]
        return pts[k] + lam * (pts[k + 1] - pts[k])

    centers = [np.asarray(x0, dtype=float)]
    while np.linalg.norm(centers[-1] - y) > 2.0 * r1:
        c = centers[-1]
        samples = np.linspace(0.0, t[-1], 20001)
        vals = np.array([np.linalg.norm(at(s) - c) - 2.0 * r1 for s in samples])
        idx = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
        lo, hi = samples[idx[-1]], samples[idx[-1] + 1]
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if (np.linalg.norm(at(mid) - c) - 2.0 * r1) * (
                np.linalg.norm(at(lo) - c) - 2.0 * r1
            ) <= 0.0:
                hi = mid
            else:
                lo = mid
        centers.append(at(0.5 * (lo + hi)))
    centers.append(np.asarray(y, dtype=float))
    return np.asarray(centers)


def test_chain_l_corridor_matches_polyline_walk():
    # L-shaped corridor: horizontal arm [0,1]x[0,0.1], vertical arm [0.9,1]x[0,1]
    h = 0.02
    nx, ny = 50, 50
    cells = np.zeros((ny, nx), dtype=bool)
    xs = (np.arange(nx) + 0.5) * h
    ys = (np.arange(ny) + 0.5) * h
    X, Y = np.meshgrid(xs, ys)
    cells[(Y < 0.1)] = True
    cells[(X > 0.9)] = True
    mask = geo.GridMask(0.0, 0.0, h, cells)
    x0, y = (0.05, 0.05), (0.95, 0.95)
    r1 = 0.05
    plan = build_chain(mask, x0, y, r1)
    ref = _reference_walk(geo.geodesic_path(mask, x0, y), x0, y, r1)
    assert plan.N == len(ref) - 1
    assert np.allclose(plan.centers, ref, atol=1e-6)
    checks = plan.verify()
    assert checks["passed"]


def test_chain_invariants_randomized():
    rng = RNG(5)
    for trial in range(200):
        nx = int(rng.integers(25, 45))
        ny = int(rng.integers(25, 45))
        h = float(rng.uniform(0.02, 0.05))
        cells = np.ones((ny, nx), dtype=bool)
        # vertical wall with a gap bends the geodesic
        wall = int(rng.integers(nx // 3, 2 * nx // 3))
        gap = int(rng.integers(2, ny - 4))
        cells[:, wall] = False
        cells[gap : gap + 3, wall] = True
        mask = geo.GridMask(0.0, 0.0, h, cells)
        xs, ys = mask.cell_centers()
        x0 = (xs[2], ys[int(rng.integers(2, ny - 2))])
        y = (xs[nx - 3], ys[int(rng.integers(2, ny - 2))])
        r1 = float(rng.uniform(0.3, 1.2)) * h
        plan = build_chain(mask, x0, y, r1)
        checks = plan.verify(tol=1e-9)
        assert checks["passed"], f"trial {trial}: {checks}"
        assert checks["max_step_defect"] <= 1e-9 * 2.0 * r1 + 1e-15


def test_chain_rejects_outside_points():
    mask = full_mask(0.0, 0.0, 0.1, 10, 10)
    with pytest.raises(SmallnessError):
        build_chain(mask, (-5.0, 0.5), (0.5, 0.5), 0.05)
    with pytest.raises(SmallnessError):
        build_chain(mask, (0.5, 0.5), (9.0, 9.0), 0.05)
    with pytest.raises(SmallnessError):
        build_chain(mask, (0.5, 0.5), (0.8, 0.8), 0.0)


def test_chain_rejects_disconnected_mask():
    cells = np.ones((10, 20), dtype=bool)
    cells[:, 10] = False
    mask = geo.GridMask(0.0, 0.0, 0.1, cells)
    with pytest.raises(SmallnessError, match="disconnected"):
        build_chain(mask, (0.25, 0.55), (1.85, 0.55), 0.04)


def test_chain_csv_round_trip(tmp_path):
    mask = full_mask(-0.05, -0.125, 0.025, 10, 45)
    plan = build_chain(mask, (0.0, 0.0), (1.0, 0.0), 0.1)
    out = tmp_path / "chain.csv"
    chain_to_csv(plan, out, step_Q=np.arange(plan.N + 1, dtype=float))
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "k,x,y,r1_ok,disjoint_ok,step_Q"
    assert len(lines) == plan.N + 2
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[1]) == pytest.approx(0.0, abs=1e-15)
    assert first[3] == "1" and first[4] == "1"


# ---------------------------------------------------------------------------
# exponent budget
# ---------------------------------------------------------------------------


def test_budget_derived_constant():
    b = ExponentBudget(alpha=0.5, C1=2.0, C2=3.0, area=4.0, h=0.5, delta=0.25)
    assert b.C == pytest.approx(2.0 * math.sqrt(4.0 / 0.25), rel=1e-15)
    assert b.C >= b.C1
    assert b.delta_floor == pytest.approx(0.5 ** (3.0 * 16.0), rel=1e-12)


def test_budget_defaults_to_volume_floor():
    b = ExponentBudget(alpha=0.6, C1=1.0, C2=1.0, area=1.0, h=0.5)
    assert b.delta == pytest.approx(0.6**4.0, rel=1e-12)


def test_budget_validation():
    with pytest.raises(SmallnessError):
        ExponentBudget(alpha=1.0, C1=1.0, C2=1.0, area=1.0, h=0.5)
    with pytest.raises(SmallnessError):
        ExponentBudget(alpha=0.5, C1=0.0, C2=1.0, area=1.0, h=0.5)
    with pytest.raises(SmallnessError):
        # h exceeds the domain measure: C would fall below C1
        ExponentBudget(alpha=0.5, C1=1.0, C2=1.0, area=0.5, h=1.0)
    with pytest.raises(SmallnessError):
        # delta below the volume floor alpha^(C2 |Omega| / h^2)
        ExponentBudget(alpha=0.5, C1=1.0, C2=1.0, area=1.0, h=1.0, delta=0.25)


# ---------------------------------------------------------------------------
# source size
# ---------------------------------------------------------------------------


def _unit_square_solution(n=64, bc=lambda p: p[..., 0]):
    rect = geo.Rectangle(1.0, 1.0)
    return rect, pde.solve_dirichlet(
        rect, pde.identity_coefficient(), 0.0, pde.NO_SOURCE, bc, n=n
    )


def test_source_smallness_zero():
    _, u = _unit_square_solution()
    assert source_smallness(pde.NO_SOURCE, u) == 0.0


def test_source_smallness_constant_terms():
    _, u = _unit_square_solution()
    src = pde.SourceData(f=2.0)
    # rho0^2 ||f||_{L2} over the unit square, normalized by rho0 = 1
    assert source_smallness(src, u) == pytest.approx(2.0, rel=0.05)
    src = pde.SourceData(f=0.0, F=(3.0, 4.0))
    assert source_smallness(src, u) == pytest.approx(5.0, rel=0.05)
    assert source_smallness(src, u, rho0=2.0) == pytest.approx(
        2.0 * 5.0 / 2.0, rel=0.05
    )


# ---------------------------------------------------------------------------
# interior propagation
# ---------------------------------------------------------------------------


def test_interior_zero_solution():
    rect = geo.Rectangle(1.0, 1.0)
    grid = pde.RectGrid(0.0, 0.0, 1.0 / 64, 65, 65)
    zeros = np.zeros((65, 65))
    active = np.ones((65, 65), dtype=bool)
    u = pde.DiscreteSolution(grid, zeros, active, active)
    G = geo.interior_envelope(rect, 0.2, spacing=grid.h)
    rep = interior_propagation(
        u, pde.NO_SOURCE, (0.5, 0.5), 0.4, G, 0.2, domain=rect
    )
    assert rep.measured == 0.0
    assert rep.bound >= 0.0
    assert rep.passed
    assert rep.result_line().startswith("RESULT pass measured=0.0")


def test_interior_harmonic_certificate():
    disc = geo.Disc(1.0)
    u = pde.solve_dirichlet(
        disc,
        pde.identity_coefficient(),
        0.0,
        pde.NO_SOURCE,
        lambda p: np.exp(p[..., 0]) * np.cos(p[..., 1]),
        n=192,
    )
    G = geo.interior_envelope(disc, 0.3, spacing=u.grid.h)
    rep = interior_propagation(u, pde.NO_SOURCE, (0.0, 0.0), 0.6, G, 0.3, domain=disc)
    assert rep.passed
    assert rep.measured <= rep.bound
    assert 0.0 < rep.delta < 1.0
    assert rep.plan.verify()["passed"]
    # delta equals alpha^N for the capped chain length N >= realized steps
    n_used = round(math.log(rep.delta) / math.log(rep.budget.alpha))
    assert n_used >= rep.plan.N
    assert rep.delta == pytest.approx(rep.budget.alpha**n_used, rel=1e-12)
    assert rep.delta >= rep.budget.delta_floor
    # tessellation count against the covering bound J <= |Omega| / (2 r1^2)
    r1 = rep.plan.r1
    assert rep.J <= disc.area() / (2.0 * r1 * r1) * 1.5 + 4


def test_interior_certificates_on_geometry_suite():
    cases = [
        (geo.Rectangle(1.0, 1.0), (0.5, 0.5)),
        (geo.Rectangle(2.0, 1.0), (1.0, 0.5)),
        (geo.Disc(1.0), (0.0, 0.0)),
    ]
    for dom, x0 in cases:
        u = pde.solve_dirichlet(
            dom,
            pde.identity_coefficient(),
            0.0,
            pde.NO_SOURCE,
            lambda p: np.real((p[..., 0] + 1j * p[..., 1] - (x0[0] + 1j * x0[1])) ** 3),
            n=128,
        )
        G = geo.interior_envelope(dom, 0.2, spacing=u.grid.h)
        rep = interior_propagation(u, pde.NO_SOURCE, x0, 0.4, G, 0.2, domain=dom)
        assert rep.passed, rep.notes
        assert rep.measured <= rep.bound


def test_interior_bound_monotone_in_eta():
    disc = geo.Disc(1.0)
    u = pde.solve_dirichlet(
        disc,
        pde.identity_coefficient(),
        0.0,
        pde.NO_SOURCE,
        lambda p: p[..., 0] * p[..., 1],
        n=128,
    )
    G = geo.interior_envelope(disc, 0.25, spacing=u.grid.h)
    kw = dict(domain=disc)
    base = interior_propagation(u, pde.NO_SOURCE, (0.0, 0.0), 0.5, G, 0.25, **kw)
    bounds = []
    for eta in (2.0, 5.0, 20.0):
        rep = interior_propagation(
            u, pde.NO_SOURCE, (0.0, 0.0), 0.5, G, 0.25, eta=eta * base.eta, **kw
        )
        assert rep.passed
        bounds.append(rep.bound)
    assert bounds[0] < bounds[1] < bounds[2]


def test_interior_flags_stated_eta_violation():
    disc = geo.Disc(1.0)
    u = pde.solve_dirichlet(
        disc,
        pde.identity_coefficient(),
        0.0,
        pde.NO_SOURCE,
        lambda p: 1.0 + 0.0 * p[..., 0],
        n=96,
    )
    G = geo.interior_envelope(disc, 0.25, spacing=u.grid.h)
    rep = interior_propagation(
        u, pde.NO_SOURCE, (0.0, 0.0), 0.5, G, 0.25, domain=disc, eta=1e-12
    )
    assert not rep.passed
    assert any("exceeds the stated eta" in note for note in rep.notes)


def test_interior_rejects_bad_geometry():
    rect = geo.Rectangle(1.0, 1.0)
    u = pde.solve_dirichlet(
        rect, pde.identity_coefficient(), 0.0, pde.NO_SOURCE, lambda p: p[..., 0], n=64
    )
    full = geo.rasterize(rect, spacing=u.grid.h)
    with pytest.raises(SmallnessError, match="closer than h"):
        interior_propagation(u, pde.NO_SOURCE, (0.5, 0.5), 0.4, full, 0.2, domain=rect)
    G = geo.interior_envelope(rect, 0.2, spacing=u.grid.h)
    with pytest.raises(SmallnessError, match="not inside G"):
        interior_propagation(u, pde.NO_SOURCE, (0.25, 0.25), 0.4, G, 0.2, domain=rect)
    with pytest.raises(SmallnessError, match="r0/2"):
        interior_propagation(u, pde.NO_SOURCE, (0.5, 0.5), 0.3, G, 0.2, domain=rect)
    two_blobs = np.zeros((20, 20), dtype=bool)
    two_blobs[2:6, 2:6] = True
    two_blobs[14:18, 14:18] = True
    bad = geo.GridMask(0.0, 0.0, 0.05, two_blobs)
    with pytest.raises(SmallnessError, match="connected"):
        interior_propagation(u, pde.NO_SOURCE, (0.2, 0.2), 0.2, bad, 0.1, domain=rect)


def test_interior_report_csv(tmp_path):
    disc = geo.Disc(1.0)
    u = pde.solve_dirichlet(
        disc,
        pde.identity_coefficient(),
        0.0,
        pde.NO_SOURCE,
        lambda p: p[..., 0],
        n=96,
    )
    G = geo.interior_envelope(disc, 0.3, spacing=u.grid.h)
    rep = interior_propagation(u, pde.NO_SOURCE, (0.0, 0.0), 0.6, G, 0.3, domain=disc)
    out = tmp_path / "report.csv"
    rep.to_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "k,x,y,r1_ok,disjoint_ok,step_Q"
    assert len(lines) == rep.plan.N + 2


# ---------------------------------------------------------------------------
# cone chains
# ---------------------------------------------------------------------------


def test_cone_frozen_reference_values():
    plan = cone_chain((0.0, 0.0), (0.0, 1.0), 1.0, 1.0, 0.05)
    root = math.sqrt(2.0)
    assert plan.t0 == pytest.approx((root / (1.0 + root)) * 0.95, rel=1e-14)
    assert plan.s0 == pytest.approx((0.95 / (1.0 + root) - 0.05) / 4.0, rel=1e-14)
    assert plan.t0 == pytest.approx(0.5564971, abs=1e-6)
    assert plan.s0 == pytest.approx(0.0858757, abs=1e-6)
    assert plan.q == pytest.approx(0.73263, abs=1e-4)
    assert plan.identity_residual <= 1e-12


def test_cone_identity_and_tangency_randomized():
    rng = RNG(11)
    for _ in range(100):
        rho0 = float(rng.uniform(0.5, 3.0))
        M0 = float(rng.uniform(1.0, 5.0))
        h0 = geo.connectivity_threshold(rho0, M0).h0
        h1 = float(rng.uniform(0.2, 0.9)) * h0
        axis = rng.normal(size=2)
        w = rng.normal(size=2)
        plan = cone_chain(w, axis, M0, rho0, h1)
        assert plan.identity_residual <= 1e-12 * rho0
        cone_res, mutual_res = plan.tangency_residuals()
        assert cone_res <= 1e-10
        assert mutual_res <= 1e-10
        assert 0.0 < plan.q < 1.0
        assert 0.0 < plan.s < 1.0


def test_cone_balls_inside_cone():
    plan = cone_chain((0.3, -0.2), (1.0, 2.0), 1.5, 1.0, 0.03)
    th = np.linspace(0.0, 2.0 * math.pi, 64, endpoint=False)
    ring = np.column_stack([np.cos(th), np.sin(th)])
    for yk, sk in zip(plan.centers, plan.s_k):
        pts = yk[None, :] + sk * ring
        assert (plan.cone_distance(pts) >= -1e-9).all()
    assert plan.contains(plan.centers).all()


def test_cone_geometric_sum():
    plan = cone_chain((0.0, 0.0), (0.0, 1.0), 1.0, 1.0, 0.05, resolution=1e-6)
    n = plan.n_balls
    partial = float(np.sum(2.0 * plan.s_k))
    closed = plan.geometric_sum * (1.0 - plan.q**n)
    assert partial == pytest.approx(closed, rel=1e-12)
    assert partial <= plan.geometric_sum


def test_cone_resolution_stop():
    plan = cone_chain((0.0, 0.0), (0.0, 1.0), 1.0, 1.0, 0.05, resolution=0.01)
    assert plan.s_k[-1] < 0.01
    assert (plan.s_k[:-1] >= 0.01).all()


def test_cone_decay_exponent():
    plan = cone_chain((0.0, 0.0), (0.0, 1.0), 1.0, 1.0, 0.05)
    alpha = math.log(4.0 / 3.0) / math.log(4.0)
    D = plan.decay_exponent(alpha)
    assert D == pytest.approx(math.log(alpha) / math.log(plan.q), rel=1e-14)
    assert D > 0
    with pytest.raises(SmallnessError):
        plan.decay_exponent(1.0)


def test_cone_validation():
    with pytest.raises(SmallnessError, match="M0"):
        cone_chain((0, 0), (0, 1), 0.5, 1.0, 0.05)
    with pytest.raises(SmallnessError, match="s0"):
        cone_chain((0, 0), (0, 1), 1.0, 1.0, 0.35)
    with pytest.raises(SmallnessError, match="connectivity"):
        cone_chain((0, 0), (0, 1), 1.0, 1.0, 0.2)
    with pytest.raises(SmallnessError, match="axis"):
        cone_chain((0, 0), (0, 0), 1.0, 1.0, 0.05)
    with pytest.raises(SmallnessError, match="resolution"):
        cone_chain((0, 0), (0, 1), 1.0, 1.0, 0.05, resolution=0.0)


# ---------------------------------------------------------------------------
# phi minimization
# ---------------------------------------------------------------------------


def test_phi_symmetric_exponents():
    rep = phi_minimize(1.0, 1.0, 1e-3, 1.0)
    assert rep.mu == pytest.approx(1.0 / 3.0, rel=1e-15)
    assert rep.l == pytest.approx(1.0 / 3.0, rel=1e-15)


def test_phi_closed_form_vs_brute():
    rep = phi_minimize(1.0, 1.0, 1e-6, 1.0)
    assert rep.branch == "log"
    # the exact value at the closed-form tau is within a factor 2 of the inf
    assert rep.brute <= rep.value <= 2.0 * rep.brute
    # the presentation bound 2 (1/log(1/zeta))^mu dominates both
    assert rep.bound >= rep.value
    assert rep.bound >= rep.brute - 1e-12


def test_phi_bound_never_below_brute():
    rng = RNG(3)
    for _ in range(50):
        theta = float(rng.uniform(0.05, 3.0))
        sigma = float(rng.uniform(0.05, 3.0))
        zeta = float(10.0 ** rng.uniform(-12.0, -0.1))
        tau0 = float(rng.uniform(0.05, 1.0))
        rep = phi_minimize(theta, sigma, zeta, tau0)
        assert rep.bound >= rep.brute - 1e-12
        assert rep.value >= rep.brute - 1e-9 * max(1.0, rep.brute)


def test_phi_degenerate_zeta():
    rep = phi_minimize(1.0, 1.0, 1.0 - 1e-12, 1.0)
    assert rep.branch == "endpoint"
    assert rep.bound == pytest.approx(2.0, abs=1e-9)
    assert rep.brute <= 2.0


def test_phi_endpoint_branch():
    # zeta close to 1 pushes tau* above tau0
    rep = phi_minimize(1.0, 1.0, 0.9, 0.5)
    assert rep.branch == "endpoint"
    assert rep.tau_closed == 0.5
    expected = 0.5 + 0.5 ** (-1.0) * 0.9**0.5
    assert rep.bound == pytest.approx(expected, rel=1e-12)


def test_phi_validation():
    with pytest.raises(SmallnessError):
        phi_minimize(0.0, 1.0, 0.5, 1.0)
    with pytest.raises(SmallnessError):
        phi_minimize(1.0, -1.0, 0.5, 1.0)
    with pytest.raises(SmallnessError):
        phi_minimize(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(SmallnessError):
        phi_minimize(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(SmallnessError):
        phi_minimize(1.0, 1.0, 0.5, 0.0)
    with pytest.raises(SmallnessError):
        phi_minimize(1.0, 1.0, 0.5, 1.5)


# ---------------------------------------------------------------------------
# global propagation
# ---------------------------------------------------------------------------


def _square_solution(n=128):
    rect = geo.Rectangle(1.0, 1.0)
    u = pde.solve_dirichlet(
        rect,
        pde.identity_coefficient(),
        0.0,
        pde.NO_SOURCE,
        lambda p: np.real((p[..., 0] + 1j * p[..., 1]) ** 2),
        n=n,
    )
    return rect, u


def test_global_certificate_and_exponents():
    rect, u = _square_solution()
    rep = global_propagation(u, pde.NO_SOURCE, (0.5, 0.5), 0.4, rect, 2.0)
    assert rep.passed, rep.notes
    assert rep.measured <= rep.bound
    b = rep.budget
    assert rep.mu == pytest.approx(b.theta / (1.0 + b.theta + b.sigma), rel=1e-12)
    alpha_cone = math.log(4.0 / 3.0) / math.log(4.0)
    D = rep.cone.decay_exponent(alpha_cone)
    assert b.theta == pytest.approx((0.5 - 1.0 / b.p) / D, rel=1e-12)
    assert b.sigma == pytest.approx(1.0 / D, rel=1e-12)
    assert b.gamma == pytest.approx(alpha_cone * rep.delta, rel=1e-12)
    assert b.tau0 == pytest.approx((rep.cone.h1 / rep.cone.t0) ** D, rel=1e-12)


def test_global_degenerate_eta_is_trivially_safe():
    rect, u = _square_solution(n=96)
    rep = global_propagation(u, pde.NO_SOURCE, (0.5, 0.5), 0.4, rect, 2.0, eta=2.0)
    assert math.isinf(rep.bound)
    assert rep.passed
    assert any("degenerate" in note for note in rep.notes)


def test_global_flags_energy_violation():
    rect, u = _square_solution(n=96)
    rep = global_propagation(u, pde.NO_SOURCE, (0.5, 0.5), 0.4, rect, 1e-6)
    assert not rep.passed
    assert any("exceeds the stated E" in note for note in rep.notes)


# ---------------------------------------------------------------------------
# log-log modulus
# ---------------------------------------------------------------------------


def test_loglog_decreasing_in_tau():
    vals = [
        loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, log_tau=lt)
        for lt in (-10.0, -100.0, -1000.0)
    ]
    assert vals[0] > vals[1] > vals[2]
    assert all(v > 0 for v in vals)


def test_loglog_boundary_case_tiny_s0():
    s0 = 1e-6
    v = loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, s0, log_tau=-10.0)
    D = 0.5 * (0.5 - 0.25)
    delta = math.exp((1.0 / s0) * math.log(0.5)) if s0 > 1e-3 else 0.0
    direct = s0 ** (-0.5) * math.exp(delta * -10.0) + s0**D
    assert v == pytest.approx(direct, rel=1e-6)


def test_loglog_d_scaling_monotone():
    v1 = loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, log_tau=-100.0)
    v2 = loglog_modulus(1.0, 2.0, 4.0, 0.5, 1.0, 1.0, 1.0, log_tau=-100.0)
    assert v2 <= v1 + 1e-15


def test_loglog_accepts_direct_tau():
    a = loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, tau=math.exp(-10.0))
    b = loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, log_tau=-10.0)
    assert a == pytest.approx(b, rel=1e-12)


def test_loglog_parameter_domain():
    with pytest.raises(SmallnessError, match="1/e"):
        loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, tau=0.5)
    with pytest.raises(SmallnessError, match="below -1"):
        loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, log_tau=-0.5)
    with pytest.raises(SmallnessError, match="exactly one"):
        loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0)
    with pytest.raises(SmallnessError, match="exactly one"):
        loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, tau=0.1, log_tau=-3.0)
    with pytest.raises(SmallnessError):
        loglog_modulus(1.0, 1.0, 2.0, 0.5, 1.0, 1.0, 1.0, log_tau=-10.0)
    with pytest.raises(SmallnessError):
        loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.5, log_tau=-10.0)


def test_loglog_fit_has_loglog_rate():
    log_taus = [-10.0, -30.0, -100.0, -300.0, -1000.0]
    vals = [
        loglog_modulus(1.0, 1.0, 4.0, 0.5, 1.0, 1.0, 1.0, log_tau=lt)
        for lt in log_taus
    ]
    S, C, corr = fit_loglog_rate(log_taus, vals)
    assert S > 0
    assert C > 0
    assert corr < -0.95
    fitted = C * np.log(-np.asarray(log_taus)) ** (-S)
    assert np.all(np.asarray(vals) <= fitted * 1.25)


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------


def test_fit_log_rate_recovers_synthetic():
    ns = np.arange(5.0, 41.0)
    etas = np.exp(-ns)
    values = 3.0 * ns**-0.5
    mu, C, corr = fit_log_rate(etas, values)
    assert mu == pytest.approx(0.5, rel=1e-9)
    assert C == pytest.approx(3.0, rel=1e-9)
    assert corr == pytest.approx(-1.0, abs=1e-12)


def test_fit_loglog_rate_recovers_synthetic():
    log_taus = -np.geomspace(10.0, 1000.0, 12)
    values = 2.0 * np.log(-log_taus) ** -0.25
    S, C, corr = fit_loglog_rate(log_taus, values)
    assert S == pytest.approx(0.25, rel=1e-9)
    assert C == pytest.approx(2.0, rel=1e-9)


def test_fit_validation():
    with pytest.raises(SmallnessError):
        fit_log_rate([0.1], [1.0])
    with pytest.raises(SmallnessError):
        fit_log_rate([1.5, 0.5], [1.0, 1.0])
    with pytest.raises(SmallnessError):
        fit_loglog_rate([-0.5, -10.0], [1.0, 1.0])


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------


def test_result_line_format():
    plan = ChainPlan(
        centers=np.array([[0.0, 0.0], [0.1, 0.0]]),
        radii=(0.05, 0.15, 0.75),
        x0=np.array([0.0, 0.0]),
        y=np.array([0.1, 0.0]),
    )
    from cauchylab.smallness import StabilityReport

    rep = StabilityReport(
        mode="interior",
        measured=0.5,
        bound=1.25,
        delta=0.125,
        passed=True,
        eta=0.1,
        E=1.0,
        eps=0.0,
        plan=plan,
    )
    line = rep.result_line()
    assert line == "RESULT pass measured=0.5 bound=1.25 delta=0.125"
    rep.passed = False
    assert rep.result_line().startswith("RESULT fail ")
