"""Grid, discrete calculus, solver, and serialization contracts.

Expected values come from independent routes: analytic derivatives,
closed-form solutions, and quadrature identities, frozen here.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reiterate.errors import CompatibilityError, ResolutionError
from reiterate.grid import (
    Grid,
    GridFunction,
    ball_average,
    divergence,
    gradient,
    l2_norm,
    load_gridfunction,
    mean,
    save_gridfunction,
    solve_box_dirichlet,
    solve_periodic_elliptic,
)


def torus_scalar(n, fn, d=1):
    g = Grid.torus(d, n)
    return GridFunction.from_callable(g, lambda x: fn(*(x[:, i] for i in range(d))))


# ---------------------------------------------------------------------------
# geometry


def test_spacing_times_cells_is_extent():
    for g in (Grid.torus(1, 64), Grid.torus(2, 32), Grid.box(0.0, 1.0, 64),
              Grid.box((0.0, -1.0), (2.0, 1.0), (32, 64))):
        for h, n, e in zip(g.spacing, g.shape, g.extent):
            assert h * n == pytest.approx(e, rel=1e-15)


def test_periodic_grid_stores_no_duplicate_layer():
    g = Grid.torus(1, 16)
    assert g.node_shape == (16,)
    assert g.axis_coords(0)[-1] == pytest.approx(1.0 - 1.0 / 16)


def test_box_grid_stores_both_boundary_layers():
    g = Grid.box(0.0, 1.0, 16)
    coords = g.axis_coords(0)
    assert coords[0] == 0.0 and coords[-1] == 1.0 and len(coords) == 17


def test_rejects_unsupported_dimension():
    with pytest.raises(ValueError):
        Grid(shape=(8, 8, 8), periodic=True, lo=(0,) * 3, hi=(1,) * 3)


# ---------------------------------------------------------------------------
# discrete calculus


def test_gradient_matches_analytic_derivative_second_order():
    errs = []
    for n in (64, 128, 256):
        f = torus_scalar(n, lambda y: np.sin(2 * np.pi * y))
        grad = gradient(f).values[:, 0]
        exact = 2 * np.pi * np.cos(2 * np.pi * f.grid.axis_coords(0))
        errs.append(np.max(np.abs(grad - exact)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_gradient_exact_on_affine_box_including_boundary():
    g = Grid.box((0.0, 0.0), (1.0, 2.0), (16, 16))
    f = GridFunction.from_callable(g, lambda x: 2.0 * x[:, 0] - 3.0 * x[:, 1] + 1.0)
    grad = gradient(f).values
    assert np.allclose(grad[..., 0], 2.0, atol=1e-13)
    assert np.allclose(grad[..., 1], -3.0, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=8, max_value=40), st.integers(min_value=0, max_value=2**32 - 1))
def test_divergence_is_negative_adjoint_of_gradient_on_torus(n, seed):
    rng = np.random.default_rng(seed)
    g = Grid.torus(2, n)
    u = GridFunction(g, rng.standard_normal(g.node_shape))
    v = GridFunction(g, rng.standard_normal(g.node_shape + (2,)))
    lhs = np.sum(divergence(v).values * u.values)
    rhs = -np.sum(v.values * gradient(u).values)
    scale = max(1.0, abs(lhs))
    assert abs(lhs - rhs) <= 1e-12 * scale


def test_mean_is_node_average():
    f = torus_scalar(128, lambda y: 2.0 + np.sin(2 * np.pi * y))
    assert mean(f) == pytest.approx(2.0, abs=1e-13)


def test_ball_average_second_moment_oracle():
    # (mean of x1^2 over the ball)^(1/2) -> r/sqrt(d+2) for balls away from edges
    g = Grid.box((0.0, 0.0), (1.0, 1.0), (256, 256))
    f = GridFunction.from_callable(g, lambda x: x[:, 0] - 0.5)
    r = 0.25
    got = ball_average(f, (0.5, 0.5), r, p=2)
    assert got == pytest.approx(r / 2.0, rel=0.05)  # sqrt(d+2) = 2 in d=2


def test_ball_average_full_domain_is_l2_mean():
    rng = np.random.default_rng(3)
    g = Grid.box(0.0, 1.0, 64)
    f = GridFunction(g, rng.standard_normal(g.node_shape))
    got = ball_average(f, (0.5,), 10.0, p=2)
    assert got == pytest.approx(np.sqrt(np.mean(f.values**2)), rel=1e-12)


def test_ball_average_rejects_tiny_balls():
    g = Grid.box(0.0, 1.0, 32)
    f = GridFunction(g, np.ones(g.node_shape))
    with pytest.raises(ResolutionError):
        ball_average(f, (0.5,), 0.01)


# ---------------------------------------------------------------------------
# periodic solver


def test_periodic_solve_constant_coefficient_manufactured():
    # -div(grad u) = (2 pi)^2 sin(2 pi y) has u = sin(2 pi y), mean zero
    g = Grid.torus(1, 128)
    a = GridFunction.constant(g, np.eye(1))
    rhs = torus_scalar(128, lambda y: (2 * np.pi) ** 2 * np.sin(2 * np.pi * y))
    u = solve_periodic_elliptic(a, rhs, tol=1e-12)
    exact = np.sin(2 * np.pi * g.axis_coords(0))
    assert np.max(np.abs(u.values - exact)) < 2e-3
    assert abs(u.values.mean()) < 1e-12


def test_periodic_solve_variable_coefficient_convergence_order():
    # manufactured u = sin(2 pi y), a = 2 + sin(2 pi y):
    # rhs = -(a u')' = -a' u' - a u'' computed analytically
    errs = []
    for n in (64, 128, 256):
        g = Grid.torus(1, n)
        y = g.axis_coords(0)
        a_vals = (2 + np.sin(2 * np.pi * y))[:, None, None] * np.ones((1, 1))
        a = GridFunction(g, a_vals)
        rhs_vals = -(2 * np.pi) ** 2 * (
            np.cos(2 * np.pi * y) ** 2 - (2 + np.sin(2 * np.pi * y)) * np.sin(2 * np.pi * y)
        )
        rhs = GridFunction(g, rhs_vals - rhs_vals.mean())
        u = solve_periodic_elliptic(a, rhs, tol=1e-12)
        exact = np.sin(2 * np.pi * y)
        errs.append(np.sqrt(np.mean((u.values - (exact - exact.mean())) ** 2)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_periodic_solve_2d_manufactured_convergence():
    # u = sin(2 pi y1) cos(2 pi y2), a = (2 + sin(2 pi y1)) I
    def exact(y1, y2):
        return np.sin(2 * np.pi * y1) * np.cos(2 * np.pi * y2)

    errs = []
    for n in (16, 32, 64):
        g = Grid.torus(2, n)
        nodes = g.nodes()
        y1, y2 = nodes[..., 0], nodes[..., 1]
        a_scalar = 2 + np.sin(2 * np.pi * y1)
        a_vals = np.zeros(g.node_shape + (2, 2))
        a_vals[..., 0, 0] = a_scalar
        a_vals[..., 1, 1] = a_scalar
        # rhs = -div(a grad u) = -da/dy1 du/dy1 - a lap(u)
        du1 = 2 * np.pi * np.cos(2 * np.pi * y1) * np.cos(2 * np.pi * y2)
        da1 = 2 * np.pi * np.cos(2 * np.pi * y1)
        lap = -2 * (2 * np.pi) ** 2 * exact(y1, y2)
        rhs_vals = -da1 * du1 - a_scalar * lap
        rhs = GridFunction(g, rhs_vals - rhs_vals.mean())
        u = solve_periodic_elliptic(GridFunction(g, a_vals), rhs, tol=1e-11)
        ex = exact(y1, y2)
        errs.append(np.sqrt(np.mean((u.values - (ex - ex.mean())) ** 2)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_periodic_solve_rejects_nonzero_mean_rhs():
    g = Grid.torus(1, 32)
    a = GridFunction.constant(g, np.eye(1))
    rhs = GridFunction(g, np.ones(g.node_shape))
    with pytest.raises(CompatibilityError):
        solve_periodic_elliptic(a, rhs)


def test_periodic_solver_records_residual_history():
    g = Grid.torus(1, 64)
    a = GridFunction.constant(g, np.eye(1))
    rhs = torus_scalar(64, lambda y: np.sin(2 * np.pi * y))
    u = solve_periodic_elliptic(a, rhs, tol=1e-10)
    assert u.meta["iterations"] >= 1
    assert u.meta["residuals"][-1] <= 1e-10


def test_discrete_operator_is_self_adjoint():
    from reiterate.grid import FluxStencil

    rng = np.random.default_rng(7)
    g = Grid.torus(2, 24)
    nodes = g.nodes()
    a_vals = np.zeros(g.node_shape + (2, 2))
    a_vals[..., 0, 0] = 2 + np.sin(2 * np.pi * nodes[..., 0])
    a_vals[..., 1, 1] = 2 + np.cos(2 * np.pi * nodes[..., 1])
    a_vals[..., 0, 1] = 0.3 * np.sin(2 * np.pi * nodes[..., 0]) * np.sin(2 * np.pi * nodes[..., 1])
    a_vals[..., 1, 0] = a_vals[..., 0, 1]
    st_ = FluxStencil(GridFunction(g, a_vals))
    u = rng.standard_normal(g.node_shape)
    v = rng.standard_normal(g.node_shape)
    lhs = np.sum(st_.apply(u) * v)
    rhs = np.sum(u * st_.apply(v))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_energy_stability_periodic():
    # mu |grad u|^2 <= <rhs, u> for the isotropic flux form
    g = Grid.torus(1, 128)
    y = g.axis_coords(0)
    a = GridFunction(g, (2 + np.sin(2 * np.pi * y))[:, None, None])
    rhs = torus_scalar(128, lambda t: np.sin(4 * np.pi * t))
    u = solve_periodic_elliptic(a, rhs, tol=1e-12)
    mu = 1.0  # min coefficient value
    du = (np.roll(u.values, -1) - u.values) / g.spacing[0]
    energy = mu * np.mean(du**2)
    pairing = np.mean(rhs.values * u.values)
    assert energy <= pairing * (1 + 1e-8) + 1e-14


# ---------------------------------------------------------------------------
# box solver


def test_box_solve_closed_form_poisson():
    # -u'' = 1, u(0)=u(1)=0 has u = x(1-x)/2; frozen closed form
    g = Grid.box(0.0, 1.0, 64)
    a = GridFunction.constant(g, np.eye(1))
    rhs = GridFunction(g, np.ones(g.node_shape))
    u = solve_box_dirichlet(a, rhs, 0.0, tol=1e-12)
    x = g.axis_coords(0)
    assert np.max(np.abs(u.values - x * (1 - x) / 2)) < 1e-10  # scheme is exact here


def test_box_solve_affine_exactness():
    g = Grid.box((0.0, 0.0), (1.0, 1.0), (16, 16))
    a = GridFunction.constant(g, np.eye(2))
    rhs = GridFunction(g, np.zeros(g.node_shape))
    bv = GridFunction.from_callable(g, lambda x: x[:, 0])
    u = solve_box_dirichlet(a, rhs, bv, tol=1e-13)
    assert np.max(np.abs(u.values - g.nodes()[..., 0])) < 1e-11


def test_box_solve_boundary_values_exact():
    g = Grid.box((0.0, 0.0), (1.0, 1.0), (12, 12))
    a = GridFunction.constant(g, np.eye(2))
    rhs = GridFunction(g, np.zeros(g.node_shape))
    bv = GridFunction.from_callable(g, lambda x: np.sin(np.pi * x[:, 0]) * (1 - x[:, 1]))
    u = solve_box_dirichlet(a, rhs, bv, tol=1e-11)
    m = g.boundary_mask()
    assert np.array_equal(u.values[m], bv.values[m])


def test_box_solve_discrete_maximum_principle():
    g = Grid.box((0.0, 0.0), (1.0, 1.0), (20, 20))
    a = GridFunction.constant(g, np.eye(2))
    rhs = GridFunction(g, np.zeros(g.node_shape))
    rng = np.random.default_rng(11)
    bv_vals = np.zeros(g.node_shape)
    m = g.boundary_mask()
    bv_vals[m] = rng.uniform(-1.0, 2.0, size=int(m.sum()))
    u = solve_box_dirichlet(a, rhs, GridFunction(g, bv_vals), tol=1e-12)
    assert u.values.max() <= bv_vals[m].max() + 1e-9
    assert u.values.min() >= bv_vals[m].min() - 1e-9


def test_box_solve_variable_coefficient_convergence_order():
    # manufactured on (0,1): u = sin(pi x), a = 2 + x^2 (via expression values)
    errs = []
    for n in (32, 64, 128):
        g = Grid.box(0.0, 1.0, n)
        x = g.axis_coords(0)
        a = GridFunction(g, (2 + x * x)[:, None, None])
        u_exact = np.sin(np.pi * x)
        rhs_vals = -(2 * x * np.pi * np.cos(np.pi * x) - (2 + x * x) * np.pi**2 * np.sin(np.pi * x))
        u = solve_box_dirichlet(a, GridFunction(g, rhs_vals), 0.0, tol=1e-13)
        errs.append(np.sqrt(np.mean((u.values - u_exact) ** 2)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


# ---------------------------------------------------------------------------
# serialization


@settings(max_examples=10, deadline=None)
@given(shape_case=st.sampled_from([(1, ()), (1, ("v",)), (2, ()), (2, ("v",)), (2, ("m",))]),
       periodic=st.booleans(), seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_binary_roundtrip_bit_exact(shape_case, periodic, seed, tmp_path_factory):
    d, comp = shape_case
    rng = np.random.default_rng(seed)
    g = Grid.torus(d, 8) if periodic else Grid.box((0.0,) * d, (1.0,) * d, (8,) * d)
    comp_shape = {(): (), ("v",): (d,), ("m",): (d, d)}[comp]
    f = GridFunction(g, rng.standard_normal(g.node_shape + comp_shape))
    path = tmp_path_factory.mktemp("io") / "field.bin"
    save_gridfunction(f, path)
    back = load_gridfunction(path, g)
    assert np.array_equal(back.values, f.values)
    auto = load_gridfunction(path)
    assert np.array_equal(auto.values, f.values)
    assert auto.grid.node_shape == g.node_shape


def test_load_rejects_corrupt_header(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError):
        load_gridfunction(p)


def test_load_rejects_truncated_payload(tmp_path):
    g = Grid.torus(1, 16)
    f = GridFunction(g, np.arange(16.0))
    p = tmp_path / "trunc.bin"
    save_gridfunction(f, p)
    data = p.read_bytes()
    p.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_gridfunction(p)


def test_l2_norm_quadrature_weight():
    g = Grid.box(0.0, 2.0, 64)
    f = GridFunction(g, np.ones(g.node_shape))
    # sqrt(h * count) = sqrt(extent + h) for the node-inclusive box
    assert l2_norm(f) == pytest.approx(np.sqrt(2.0 + g.spacing[0]), rel=1e-12)
