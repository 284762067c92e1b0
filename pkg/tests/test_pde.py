"""Solver, norm, and trace-norm checks against closed-form oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cauchylab.geometry import Annulus, Disc, Rectangle
from cauchylab.pde import (
    NO_SOURCE,
    DirichletSystem,
    DiscreteSolution,
    IndefiniteOperatorError,
    PDEError,
    RectGrid,
    SolverConvergenceError,
    SourceData,
    UnsupportedCoefficientError,
    _pcg,
    diagonal_coefficient,
    grid_aligned_box,
    grid_for_domain,
    identity_coefficient,
    matrix_coefficient,
    norm_h1,
    norm_l2,
    scalar_coefficient,
    solution_to_csv,
    solve_dirichlet,
    trace_duality_gap,
    trace_norm,
)

SQ = Rectangle(1.0, 1.0)
EYE = identity_coefficient()


def _grid_function(fn, n=64, domain=SQ):
    """Wrap an exact function as a DiscreteSolution on a full grid."""
    grid = grid_for_domain(domain, n)
    vals = fn(grid.nodes())
    active = np.ones_like(vals, dtype=bool)
    return DiscreteSolution(
        grid=grid, values=vals, active=active, unknown=active.copy()
    )


# ---------------------------------------------------------------------------
# discrete solves
# ---------------------------------------------------------------------------


def test_linear_functions_reproduce_exactly():
    g = lambda p: 2.0 * p[..., 0] - 3.0 * p[..., 1] + 1.0  # noqa: E731
    sol = solve_dirichlet(SQ, EYE, 0.0, NO_SOURCE, g, n=32)
    exact = g(sol.grid.nodes())
    err = np.abs(sol.values - exact)[sol.active].max()
    assert err < 1e-8
    assert sol.symmetric


def test_harmonic_quadratic_exact_to_solver_tol():
    g = lambda p: p[..., 0] ** 2 - p[..., 1] ** 2  # noqa: E731
    sol = solve_dirichlet(SQ, EYE, 0.0, NO_SOURCE, g, n=32)
    err = np.abs(sol.values - g(sol.grid.nodes()))[sol.active].max()
    assert err < 1e-7


def test_screened_mode_matches_separated_solution():
    # -rho0^2 Lap v + v = 0 with v = sin(pi x) on the bottom edge
    rho0 = 1.0
    om = math.sqrt(math.pi**2 + 1.0 / rho0**2)

    def g(p):
        return np.where(
            p[..., 1] < 0.5, np.sin(math.pi * p[..., 0]), 0.0
        ) * np.exp(0.0)

    sol = solve_dirichlet(
        SQ, scalar_coefficient(rho0**2), -1.0, NO_SOURCE, g, n=128
    )
    exact = lambda x, y: math.sin(math.pi * x) * math.sinh(  # noqa: E731
        om * (1 - y)
    ) / math.sinh(om)
    for x, y in ((0.5, 0.25), (0.5, 0.5), (0.25, 0.75)):
        got = float(sol.interpolate(np.array([x, y])))
        assert got == pytest.approx(exact(x, y), abs=5e-4)


def test_neumann_walls_cosine_mode():
    # u = cos(pi x) sinh(pi y)/sinh(pi) has zero normal flux at x = 0, 1
    def g(p):
        return np.where(p[..., 1] > 0.5, np.cos(math.pi * p[..., 0]), 0.0)

    sol = solve_dirichlet(
        SQ, EYE, 0.0, NO_SOURCE, g, n=128, neumann_sides=("left", "right")
    )
    assert sol.symmetric
    exact = lambda x, y: math.cos(math.pi * x) * math.sinh(  # noqa: E731
        math.pi * y
    ) / math.sinh(math.pi)
    for x, y in ((0.0, 0.5), (1.0, 0.25), (0.5, 0.5), (0.25, 0.75)):
        got = float(sol.interpolate(np.array([x, y])))
        assert got == pytest.approx(exact(x, y), abs=2e-3)


def test_disc_dirichlet_uses_boundary_cuts():
    g = lambda p: p[..., 0] ** 2 - p[..., 1] ** 2  # noqa: E731
    sol = solve_dirichlet(Disc(1.0), EYE, 0.0, NO_SOURCE, g, n=128)
    assert not sol.symmetric
    nodes = sol.grid.nodes()
    err = np.abs(sol.values - g(nodes))[sol.unknown].max()
    assert err < 2e-3
    assert sol.residual < 1e-9


def test_annulus_log_solution():
    dom = Annulus(1.0, 2.0)
    g = lambda p: np.log(np.hypot(p[..., 0], p[..., 1])) / math.log(2)  # noqa: E731
    sol = solve_dirichlet(dom, EYE, 0.0, NO_SOURCE, g, n=128)
    for ang in (0.0, 0.7, 2.1):
        pt = 1.5 * np.array([math.cos(ang), math.sin(ang)])
        got = float(sol.interpolate(pt))
        assert got == pytest.approx(math.log(1.5) / math.log(2), abs=2e-3)


def test_piecewise_coefficient_interface_flux():
    # a = 1 for x < 1/2, a = 4 for x > 1/2: u linear in each slab with
    # continuous flux; with the interface bisecting a grid link (odd n),
    # harmonic face means reproduce the profile exactly at the nodes
    a = scalar_coefficient(lambda p: np.where(p[..., 0] < 0.5, 1.0, 4.0))

    def exact(p):
        x = p[..., 0]
        # u(0) = 0, u(1) = 1, flux q = 1/(0.5/1 + 0.5/4) = 1.6
        return np.where(x < 0.5, 1.6 * x, 0.8 + 0.4 * (x - 0.5))

    sol = solve_dirichlet(SQ, a, 0.0, NO_SOURCE, exact, n=33)
    err = np.abs(sol.values - exact(sol.grid.nodes()))[sol.active].max()
    assert err < 1e-7


@settings(max_examples=20, deadline=None)
@given(
    amp=st.floats(-0.8, 0.8),
    freq=st.integers(1, 3),
    phase=st.floats(0.0, 6.28),
)
def test_maximum_principle(amp, freq, phase):
    a = diagonal_coefficient(
        lambda p: 1.0 + amp * np.sin(freq * p[..., 0] + phase),
        lambda p: 1.0 + amp * np.cos(freq * p[..., 1]),
    )
    g = lambda p: np.sin(3 * p[..., 0] + phase) * np.cos(2 * p[..., 1])  # noqa: E731
    sol = solve_dirichlet(SQ, a, 0.0, NO_SOURCE, g, n=16)
    bvals = g(sol.grid.nodes())[sol.active & ~sol.unknown]
    inner = sol.values[sol.unknown]
    assert inner.max() <= bvals.max() + 1e-9
    assert inner.min() >= bvals.min() - 1e-9


def test_divergence_source_linear_flux():
    # div(grad u) = div F with F = (x, 0) and u = x^2/2: u - x^2/2 harmonic
    g = lambda p: 0.5 * p[..., 0] ** 2  # noqa: E731
    src = SourceData(f=0.0, F=lambda p: np.stack(
        [p[..., 0], np.zeros_like(p[..., 0])], axis=-1
    ))
    sol = solve_dirichlet(SQ, EYE, 0.0, src, g, n=32)
    err = np.abs(sol.values - g(sol.grid.nodes()))[sol.active].max()
    assert err < 1e-7


# ---------------------------------------------------------------------------
# failure modes
# ---------------------------------------------------------------------------


def test_full_matrix_coefficient_rejected():
    a = matrix_coefficient([[2.0, 1.0], [1.0, 2.0]])
    with pytest.raises(UnsupportedCoefficientError):
        solve_dirichlet(SQ, a, 0.0, NO_SOURCE, lambda p: p[..., 0], n=16)


def test_indefinite_reaction_term_raises():
    with pytest.raises(IndefiniteOperatorError):
        solve_dirichlet(SQ, EYE, 5000.0, NO_SOURCE, lambda p: p[..., 0], n=16)


def test_cg_iteration_cap_raises():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((40, 40))
    spd = m @ m.T + 40 * np.eye(40)
    import scipy.sparse as sp

    with pytest.raises(SolverConvergenceError) as exc:
        _pcg(sp.csr_matrix(spd), rng.standard_normal(40), cap=2)
    assert exc.value.iterations == 2


def test_incommensurable_rectangle_grid_raises():
    with pytest.raises(PDEError):
        grid_for_domain(Rectangle(1.0, 0.3), n=7)


def test_ellipticity_and_lipschitz_probe():
    a = scalar_coefficient(lambda p: 1.0 + 0.5 * np.hypot(p[..., 0], p[..., 1]))
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert a.ellipticity(pts) == pytest.approx(1.5, abs=1e-12)
    assert a.lipschitz_estimate(pts, rho0=2.0) == pytest.approx(1.0, rel=1e-3)
    bad = matrix_coefficient([[1.0, 3.0], [3.0, 1.0]])
    with pytest.raises(UnsupportedCoefficientError):
        bad.ellipticity(pts)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def test_l2_norm_of_x_matches_midpoint_rule():
    n = 50
    sol = _grid_function(lambda p: p[..., 0], n=n)
    h = 1.0 / n
    exact_mid = math.sqrt(1.0 / 3.0 - h * h / 12.0)
    assert norm_l2(sol) == pytest.approx(exact_mid, rel=1e-12)
    assert norm_l2(sol) == pytest.approx(1 / math.sqrt(3), rel=1e-3)
    assert norm_l2(sol, rho0=2.0) == pytest.approx(exact_mid / 2.0, rel=1e-12)


def test_h1_norm_of_x():
    n = 50
    sol = _grid_function(lambda p: p[..., 0], n=n)
    h = 1.0 / n
    expect = math.sqrt(1.0 / 3.0 - h * h / 12.0 + 1.0)
    assert norm_h1(sol) == pytest.approx(expect, rel=1e-12)
    rho0 = 2.0
    expect2 = math.sqrt(1.0 / 3.0 - h * h / 12.0 + 4.0) / 2.0
    assert norm_h1(sol, rho0=rho0) == pytest.approx(expect2, rel=1e-12)


def test_region_restricted_norm():
    sol = _grid_function(lambda p: np.ones_like(p[..., 0]), n=64)
    half = lambda c: c[..., 0] < 0.5  # noqa: E731
    assert norm_l2(sol, region=half) == pytest.approx(math.sqrt(0.5), rel=1e-12)


# ---------------------------------------------------------------------------
# boundary reactions
# ---------------------------------------------------------------------------


def _bottom_reactions(sol_bc, n=64):
    sys = DirichletSystem(SQ, EYE, 0.0, n=n)
    sol = sys.solve(bc=sol_bc)
    pts, vals = sys.reactions(sol)
    on_bottom = (np.abs(pts[:, 1]) < 1e-12) & (pts[:, 0] > 1e-12) & (
        pts[:, 0] < 1 - 1e-12
    )
    order = np.argsort(pts[on_bottom, 0])
    return pts[on_bottom][order], vals[on_bottom][order], sol.grid.h


def test_reactions_vertical_gradient_exact():
    pts, vals, h = _bottom_reactions(lambda p: p[..., 1], n=32)
    # u = y: co-normal flux on the bottom edge is -1, functional is -h
    assert np.abs(vals + h).max() < 1e-8


def test_reactions_tangential_gradient_exact():
    pts, vals, h = _bottom_reactions(lambda p: p[..., 0], n=32)
    # u = x: zero normal flux; the along-edge half weights must cancel
    assert np.abs(vals).max() < 1e-8


def test_reactions_saddle_exact():
    pts, vals, h = _bottom_reactions(
        lambda p: p[..., 0] ** 2 - p[..., 1] ** 2, n=32
    )
    assert np.abs(vals).max() < 1e-7


def test_reactions_mode_flux_density():
    k = 1

    def g(p):
        return np.where(
            p[..., 1] > 0.5, np.sin(k * math.pi * p[..., 0]), 0.0
        )

    pts, vals, h = _bottom_reactions(g, n=128)
    # psi = -du/dy on the bottom for u = sin(k pi x) sinh(k pi y)/sinh(k pi)
    psi = -k * math.pi * np.sin(k * math.pi * pts[:, 0]) / math.sinh(k * math.pi)
    err = np.abs(vals / h - psi).max()
    assert err < 5e-2 * np.abs(psi).max()


# ---------------------------------------------------------------------------
# trace norms
# ---------------------------------------------------------------------------


def test_trace_norm_single_mode_analytic():
    m, length = 512, math.pi
    ds = length / (m + 1)
    s = ds * np.arange(1, m + 1)
    g = np.sin(s)
    lam1 = (4.0 / ds**2) * math.sin(ds / 2.0) ** 2
    coeff_sq = length / 2.0  # int_0^pi sin^2 = pi/2
    for order in (0.5, -0.5):
        expect = math.sqrt((1.0 + lam1) ** order * coeff_sq)
        assert trace_norm(g, length, order) == pytest.approx(expect, rel=1e-10)
    rho0 = 0.7
    expect = math.sqrt((1.0 + rho0**2 * lam1) ** 0.5 * coeff_sq / rho0)
    assert trace_norm(g, length, 0.5, rho0=rho0) == pytest.approx(
        expect, rel=1e-10
    )


def test_trace_norm_converges_to_continuum():
    # ||sin||_{H^{1/2}} on (0, pi) -> (2^{1/4}) sqrt(pi/2) as ds -> 0
    m, length = 1024, math.pi
    s = length / (m + 1) * np.arange(1, m + 1)
    got = trace_norm(np.sin(s), length, 0.5)
    assert got == pytest.approx(2**0.25 * math.sqrt(math.pi / 2), rel=1e-5)


def test_trace_norm_validation():
    with pytest.raises(PDEError):
        trace_norm([1.0, 2.0, 3.0], 1.0, 0.5)
    with pytest.raises(PDEError):
        trace_norm(np.ones(8), 1.0, 0.3)
    with pytest.raises(PDEError):
        trace_norm(np.ones(4096), 1.0, 0.5)


def test_duality_gap_eigenmode_is_tight():
    m, length = 128, math.pi
    s = length / (m + 1) * np.arange(1, m + 1)
    g = np.sin(s)
    assert trace_duality_gap(g, 2.5 * g, length) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    rho0=st.floats(0.1, 10.0),
)
def test_duality_gap_never_exceeds_one(seed, rho0):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(32)
    psi = rng.standard_normal(32)
    assert trace_duality_gap(g, psi, 2.0, rho0=rho0) <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# grids and I/O
# ---------------------------------------------------------------------------


def test_grid_aligned_box_covers_walls():
    g = grid_aligned_box(-1.0, -0.5, 1.0, 0.3, 40)
    assert g.h == pytest.approx(0.05)
    assert g.xs()[0] == pytest.approx(-1.0)
    assert g.xs()[-1] == pytest.approx(1.0)
    assert g.ys()[0] == pytest.approx(-0.5)
    assert g.ys()[-1] >= 0.3


def test_interpolate_nan_outside_hull():
    sol = _grid_function(lambda p: p[..., 0], n=8)
    assert math.isnan(float(sol.interpolate(np.array([2.0, 0.5]))))


def test_solution_csv_deterministic(tmp_path):
    sol = solve_dirichlet(SQ, EYE, 0.0, NO_SOURCE, lambda p: p[..., 0], n=8)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    solution_to_csv(sol, p1)
    solution_to_csv(sol, p2)
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    assert b1.startswith(b"x,y,value\n")
