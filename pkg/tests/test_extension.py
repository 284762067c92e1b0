"""Window pocket construction, extension solves, and closure identities."""

import math

import numpy as np
import pytest

from cauchylab import pde
from cauchylab.extension import (
    ExtensionError,
    augment,
    augmented_from_text,
    augmented_target,
    augmented_to_text,
    bump,
    extend_cauchy_data,
    extended_equation,
    extension_report_csv,
    harvest_cauchy_data,
    lowered_graph,
    riesz_source,
)
from cauchylab.geometry import (
    GeometryError,
    GridMask,
    Rectangle,
    rectangle_edge_portion,
)

RECT = Rectangle(4.0, 2.0)
SP = 1.0 / 16.0


def _portion(edge="bottom", P=(2.0, 0.0), rho1=1.0):
    return rectangle_edge_portion(RECT, edge, rho0=1.25, M0=1.0, P=P, rho1=rho1)


_cache = {}


def _aug():
    if "aug" not in _cache:
        _cache["aug"] = augment(RECT, _portion())
    return _cache["aug"]


def _harmonic_pipeline():
    """Harmonic solve on the rectangle plus its harvested extension."""
    if "pipe" not in _cache:
        grid = pde.grid_for_domain(RECT, 64)
        system = pde.DirichletSystem(
            RECT, pde.identity_coefficient(), 0.0, grid=grid
        )
        bc = lambda p: p[..., 0] ** 2 - p[..., 1] ** 2  # noqa: E731
        u = system.solve(pde.NO_SOURCE, bc)
        ext = extended_equation(
            u, None, None, pde.NO_SOURCE, _aug(), system=system, tol=1e-5
        )
        _cache["pipe"] = (u, system, bc, ext)
    return _cache["pipe"]


# ---------------------------------------------------------------------------
# cutoff profile and lowered graph
# ---------------------------------------------------------------------------


def test_bump_profile_values():
    assert bump(0.0) == 1.0
    assert bump(0.2) == 1.0
    assert bump(0.375) == pytest.approx(0.5, rel=1e-15)
    assert bump(0.5) == 0.0
    assert bump(0.7) == 0.0
    out = bump(np.array([0.1, 0.3, 0.45, 2.0]))
    assert np.allclose(out, [1.0, 0.8, 0.2, 0.0], rtol=1e-14)


def test_bump_rejects_negative_argument():
    with pytest.raises(ValueError):
        bump(-0.1)
    with pytest.raises(ValueError):
        bump(np.array([0.2, -1e-3]))


def test_lowered_graph_flat_profile():
    xs = np.linspace(-1.25, 1.25, 513)
    zm = lowered_graph(xs, np.zeros_like(xs), 1.0, 1.0, 1.25)
    at = lambda x: zm[np.argmin(np.abs(xs - x))]  # noqa: E731
    assert at(0.0) == pytest.approx(-0.5, rel=1e-12)
    # untouched beyond half the window width
    outside = np.abs(xs) >= 0.5
    assert np.all(zm[outside] == 0.0)
    # plateau at depth rho1/2 inside the inner quarter
    inner = np.abs(xs) <= 0.249
    assert np.allclose(zm[inner], -0.5, rtol=0, atol=1e-12)


def test_lowered_graph_added_slope_bound():
    xs = np.linspace(-1.25, 1.25, 2049)
    z = 0.3 * np.abs(xs)
    zm = lowered_graph(xs, z, 1.0, 1.0, 1.25)
    drop = z - zm
    slope = np.abs(np.diff(drop) / np.diff(xs))
    assert slope.max() <= 2.0 * (1.0 + 1e-9)
    assert np.all(drop >= -1e-15)


def test_lowered_graph_rejects_steep_graph():
    xs = np.linspace(-1.25, 1.25, 513)
    with pytest.raises(GeometryError):
        lowered_graph(xs, 3.0 * np.abs(xs), 1.0, 1.0, 1.25)


def test_lowered_graph_rejects_oversized_window():
    xs = np.linspace(-1.25, 1.25, 513)
    with pytest.raises(GeometryError):
        lowered_graph(xs, np.zeros_like(xs), 1.5, 1.0, 1.25)


# ---------------------------------------------------------------------------
# pocket construction and certification
# ---------------------------------------------------------------------------


def test_augment_ball_radius_closed_form():
    aug = _aug()
    # rho1 / (8 (sqrt(1 + M0^2) + 1)) = (sqrt(2) - 1) / 8 at M0 = 1
    assert aug.r0 == pytest.approx((math.sqrt(2.0) - 1.0) / 8.0, rel=1e-14)
    assert aug.r0 == pytest.approx(0.051776695296636886, rel=1e-14)


def test_augment_ball_center_below_window():
    aug = _aug()
    assert aug.x0[0] == pytest.approx(2.0, abs=1e-12)
    assert aug.x0[1] == pytest.approx(aug.r0 - 0.125, abs=1e-12)
    assert aug.x0[1] < 0.0


def test_augment_certificates_all_pass():
    aug = _aug()
    assert set(aug.checks) == {
        "lipschitz_patches",
        "cylinder_in_domain",
        "cone_in_pocket",
        "ball_in_cone",
        "ball_tangency",
        "half_ball_anchored",
    }
    assert all(aug.checks.values())


def test_augment_rejects_window_beyond_scale():
    with pytest.raises(GeometryError):
        augment(RECT, _portion(rho1=1.3))


def test_augment_top_edge_orientation():
    aug = augment(RECT, _portion(edge="top", P=(2.0, 2.0)))
    assert np.allclose(aug.normal, [0.0, -1.0], atol=1e-12)
    # pocket lives outside the rectangle, above the top edge
    assert aug.x0[1] > 2.0
    assert all(aug.checks.values())


def test_local_frame_round_trip():
    aug = _aug()
    rng = np.random.default_rng(3)
    pts = rng.uniform(-3.0, 3.0, size=(40, 2))
    back = aug.to_world(aug.to_local(pts))
    assert np.allclose(back, pts, rtol=0, atol=1e-12)


def test_pocket_area_matches_profile_integral():
    # integral of the drop is 3 rho1^2 / (8 M0) = 0.375 here
    area = _aug().omega_tilde().area()
    assert area == pytest.approx(RECT.area() + 0.375, abs=1e-4)


def test_augmented_serialization_round_trip():
    aug = _aug()
    text = augmented_to_text(aug)
    back = augmented_from_text(text)
    assert back.r0 == aug.r0
    assert np.array_equal(back.xs, aug.xs)
    assert np.array_equal(back.z, aug.z)
    assert np.allclose(back.x0, aug.x0, rtol=0, atol=1e-12)
    assert all(back.checks.values())


# ---------------------------------------------------------------------------
# extension operator on the glued strip
# ---------------------------------------------------------------------------


def test_extend_constant_data_is_constant():
    v = extend_cauchy_data(lambda p: np.ones(p.shape[:-1]), _aug(), SP)
    assert np.nanmax(np.abs(v.values - 1.0)) < 1e-8


def test_extend_zero_data_is_zero():
    v = extend_cauchy_data(lambda p: np.zeros(p.shape[:-1]), _aug(), SP)
    assert np.nanmax(np.abs(v.values)) == 0.0
    assert v.meta["extension_constant"] == 0.0


def test_extend_array_matches_callable():
    aug = _aug()
    g = lambda p: np.sin(np.pi * (p[..., 0] - 1.0) / 2.0)  # noqa: E731
    v1 = extend_cauchy_data(g, aug, SP)
    cols = np.linspace(-1.0, 1.0, 33)
    pts = aug.to_world(np.stack([cols, np.zeros(33)], axis=-1))
    v2 = extend_cauchy_data(g(pts), aug, SP)
    assert np.array_equal(v1.values, v2.values, equal_nan=True)


def test_extend_bounded_on_oscillatory_data():
    # H^1 norm of the extension stays below the half-norm of the data
    aug = _aug()
    for k in range(1, 9):
        g = lambda p, k=k: np.sin(k * np.pi * (p[..., 0] - 1.0) / 2.0)  # noqa: E731
        v = extend_cauchy_data(g, aug, SP)
        assert v.meta["trace_half_norm"] > 0.0
        assert v.meta["extension_constant"] <= 1.05


def test_extend_rejects_coarse_spacing():
    with pytest.raises(GeometryError):
        extend_cauchy_data(lambda p: np.zeros(p.shape[:-1]), _aug(), 0.9)


# ---------------------------------------------------------------------------
# window flux as a volume source
# ---------------------------------------------------------------------------


def test_riesz_zero_flux_gives_zero_pair():
    pair = riesz_source(np.zeros(31), _aug(), SP)
    assert np.nanmax(np.abs(np.nan_to_num(pair.w.values))) == 0.0
    assert pair.constants["eta_psi"] == 0.0
    assert pair.constants["f1est_constant"] == 0.0


def test_riesz_reproduces_window_pairing():
    # volume pair of (f1, F1) equals the line pairing for any grid function
    aug = _aug()
    rng = np.random.default_rng(1)
    pair = riesz_source(rng.standard_normal(31), aug, SP)
    grid = pair.w.grid
    worst = 0.0
    for _ in range(20):
        phi = np.zeros((grid.ny, grid.nx))
        phi[pair.w.unknown] = rng.standard_normal(int(pair.w.unknown.sum()))
        nphi = (
            math.sqrt(
                (phi**2).sum() * SP * SP
                + aug.rho0**2
                * (
                    (np.diff(phi, axis=1) ** 2).sum()
                    + (np.diff(phi, axis=0) ** 2).sum()
                )
            )
            / aug.rho0
        )
        worst = max(worst, abs(pair.pair(phi) - pair.sigma_pair(phi)) / nphi)
    assert worst < 1e-8


def test_riesz_source_is_linear_in_flux():
    aug = _aug()
    rng = np.random.default_rng(7)
    p1, p2 = rng.standard_normal(31), rng.standard_normal(31)
    a, b = riesz_source(p1, aug, SP), riesz_source(p2, aug, SP)
    c = riesz_source(p1 + 2.0 * p2, aug, SP)
    # three independent solves at rtol 1e-10 leave a few 1e-9 absolute
    assert np.allclose(c.f1, a.f1 + 2.0 * b.f1, rtol=0, atol=1e-8)
    assert np.allclose(c.F1x, a.F1x + 2.0 * b.F1x, rtol=0, atol=1e-8)
    assert np.allclose(c.F1y, a.F1y + 2.0 * b.F1y, rtol=0, atol=1e-8)


def test_riesz_constants_frozen():
    rng = np.random.default_rng(1)
    pair = riesz_source(rng.standard_normal(31), _aug(), SP)
    assert pair.constants["eta_psi"] == pytest.approx(5.31777411928135, rel=1e-6)
    assert pair.constants["f1_norm"] == pytest.approx(0.2796092362258601, rel=1e-6)
    assert pair.constants["F1_norm"] == pytest.approx(2.841974220634886, rel=1e-6)
    assert pair.constants["f1est_constant"] == pytest.approx(
        0.7501930540697054, rel=1e-6
    )


# ---------------------------------------------------------------------------
# harvesting and the extended equation
# ---------------------------------------------------------------------------


def test_harvest_returns_boundary_values_and_flux():
    u, system, bc, _ = _harmonic_pipeline()
    g_vals, psi_line, pts = harvest_cauchy_data(u, system, _aug())
    assert g_vals.shape == (33,)
    assert psi_line.shape == (31,)
    assert np.allclose(g_vals, bc(pts), rtol=0, atol=1e-12)
    # harmonic u = x^2 - y^2 has outward flux -du/dy = 2y = 0 on the window
    # only up to the discretization, so the reactions stay O(h)
    assert np.abs(psi_line / SP).max() < 0.3


def test_extended_solution_weak_residual_at_solver_precision():
    _, _, _, ext = _harmonic_pipeline()
    assert ext.constants["residual_max"] < 1e-8


def test_extended_solution_restriction_bit_identical():
    u, _, _, ext = _harmonic_pipeline()
    iu = int(round((u.grid.y0 - ext.u_tilde.grid.y0) / SP))
    ju = int(round((u.grid.x0 - ext.u_tilde.grid.x0) / SP))
    sub = ext.u_tilde.values[iu : iu + u.grid.ny, ju : ju + u.grid.nx]
    assert np.array_equal(sub[u.active], u.values[u.active])


def test_extended_solution_small_on_interior_ball():
    _, _, _, ext = _harmonic_pipeline()
    aug = _aug()
    ball = pde.l2_on_ball(ext.u_tilde, aug.x0, aug.r0, aug.rho0)
    assert ball > 0.0
    assert ball <= 0.05 * ext.eta


def test_extended_data_norm_frozen():
    _, _, _, ext = _harmonic_pipeline()
    assert ext.eps == 0.0
    assert ext.eta == pytest.approx(12.886572492700697, rel=1e-6)
    assert ext.constants["tildefF_constant"] == pytest.approx(
        0.321890187891902, rel=1e-6
    )


def test_extended_source_scales_with_data():
    # tilde source norm stays proportional to eta across data magnitudes
    u, system, bc, ext = _harmonic_pipeline()
    lam = 1e-2
    ulam = system.solve(pde.NO_SOURCE, lambda p: lam * bc(p))
    el = extended_equation(
        ulam, None, None, pde.NO_SOURCE, _aug(), system=system, tol=1e-5
    )
    assert el.eta == pytest.approx(lam * ext.eta, rel=1e-9)
    ratio = el.constants["tildefF_constant"] / ext.constants["tildefF_constant"]
    assert abs(ratio - 1.0) < 0.05


def test_extended_zero_data_vanishes():
    _, system, _, _ = _harmonic_pipeline()
    u0 = system.solve(pde.NO_SOURCE, lambda p: np.zeros(p.shape[:-1]))
    ext = extended_equation(
        u0, None, None, pde.NO_SOURCE, _aug(), system=system, tol=1e-5
    )
    assert ext.eta == 0.0
    assert np.nanmax(np.abs(np.nan_to_num(ext.u_tilde.values))) < 1e-12
    assert np.abs(ext.f_tilde).max() < 1e-12


def test_extended_equation_variable_coefficients():
    grid = pde.grid_for_domain(RECT, 64)
    A = pde.diagonal_coefficient(
        lambda p: 1.0 + 0.3 * np.sin(p[..., 0]),
        lambda p: 1.2 + 0.2 * p[..., 1],
    )
    src = pde.SourceData(f=lambda p: np.cos(p[..., 0]) * p[..., 1], F=None)
    system = pde.DirichletSystem(RECT, A, 0.4, grid=grid)
    u = system.solve(src, lambda p: p[..., 0] ** 2 - p[..., 1] ** 2)
    ext = extended_equation(
        u, None, None, src, _aug(), system=system, A=A, c=0.4, tol=1e-5
    )
    assert ext.constants["residual_max"] < 1e-8
    assert ext.eps > 0.0


# ---------------------------------------------------------------------------
# propagation target and report
# ---------------------------------------------------------------------------


def test_augmented_target_adds_cylinder_cells():
    aug = _aug()
    G = GridMask(0.0, 0.0, SP, np.ones((32, 64), dtype=bool))
    tgt = augmented_target(aug, G)
    xs, ys = tgt.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    loc = aug.to_local(np.stack([X, Y], axis=-1))
    cyl = (np.abs(loc[..., 0]) < aug.rho1 / 8.0) & (
        np.abs(loc[..., 1]) < aug.rho1 / 8.0
    )
    assert tgt.cells[cyl].all()
    assert int(tgt.cells.sum()) > int(G.cells.sum())
    # ball center sits inside the marked frame
    x0, y0 = aug.x0
    assert tgt.x0 < x0 < tgt.x0 + tgt.cells.shape[1] * SP
    assert tgt.y0 < y0 < tgt.y0 + tgt.cells.shape[0] * SP


def test_extension_report_deterministic(tmp_path):
    _, _, _, ext = _harmonic_pipeline()
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    extension_report_csv(ext, p1)
    extension_report_csv(ext, p2)
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    assert b"eta," in b1
