import numpy as np
import pytest

from core.hitting import ConeSpec
from solvers.cone_pde import (
    ConeGrid, CylinderDomain, auto_grid, mc_bounding_value, scheme_residual, solve_bounding_cone, solve_cone,
    solve_cylinder, solve_domain,
)
from solvers.generators import HeatGenerator, UpperBoundingGenerator, ZeroGenerator
from utils.errors import ConfigurationError, PreconditionError


def time_boundary(s, x):
    return np.broadcast_to(s, x.shape[:1])


def constant_boundary(s, x):
    return np.ones(x.shape[0])


class TestGrid:
    def test_axis_covers_base(self):
        grid = ConeGrid.for_cone(ConeSpec(0.0, 0.5, 1.0, 1.0), dx=0.1, dt=0.01)
        assert grid.axis[-1] >= 0.5
        assert grid.times[0] == 0.0
        assert grid.times[-1] == pytest.approx(0.5)

    def test_too_coarse(self):
        with pytest.raises(ConfigurationError):
            ConeGrid.for_cone(ConeSpec(0.0, 0.5, 1.0, 1.0), dx=0.5, dt=0.01)

    def test_dimension_limit(self):
        with pytest.raises(ConfigurationError):
            ConeGrid.for_cone(ConeSpec(0.0, 0.5, 1.0, 1.0), dx=0.1, dt=0.01, dim=4)

    def test_auto_grid_respects_cfl(self):
        generator = UpperBoundingGenerator(1.0)
        grid = auto_grid(ConeSpec(0.0, 0.5, 1.0, 1.0), generator, dx=0.05)
        assert grid.cfl_number(generator) <= 1.0 + 1e-12


class TestSolveCone:
    def test_zero_generator_exact_solution(self):
        epsilon, dx = 0.5, 0.01
        spec = ConeSpec(0.0, epsilon, 1.0, 1.0)
        generator = ZeroGenerator()
        field = solve_cone(generator, auto_grid(spec, generator, dx), time_boundary)
        for s in (0.0, 0.1, 0.3):
            r = spec.radius_at(s)
            for x in np.linspace(-0.9 * r, 0.9 * r, 7):
                assert field.evaluate(s, [x]) == pytest.approx(epsilon - abs(x), abs=2 * dx)

    def test_constant_boundary_is_preserved(self):
        generator = HeatGenerator()
        spec = ConeSpec(0.0, 0.5, 1.0, 1.0)
        field = solve_cone(generator, auto_grid(spec, generator, dx=0.05), constant_boundary)
        assert field.apex_value == pytest.approx(1.0, abs=1e-12)

    def test_cfl_violation(self):
        generator = HeatGenerator()
        grid = ConeGrid.for_cone(ConeSpec(0.0, 0.5, 1.0, 1.0), dx=0.05, dt=0.1)
        with pytest.raises(ConfigurationError):
            solve_cone(generator, grid, constant_boundary)

    def test_requires_cone_domain(self):
        grid = ConeGrid(domain=CylinderDomain(0.0, 0.5, 0.5), dx=0.05, dt=0.01)
        with pytest.raises(ConfigurationError):
            solve_cone(ZeroGenerator(), grid, constant_boundary)
        assert solve_domain(ZeroGenerator(), grid, constant_boundary).apex_value == 1.0

    def test_boundary_points_return_boundary_data(self):
        spec = ConeSpec(0.0, 0.5, 1.0, 1.0)
        field = solve_cone(ZeroGenerator(), auto_grid(spec, ZeroGenerator(), 0.05), time_boundary)
        assert field.evaluate(0.2, [0.3]) == pytest.approx(0.2, abs=0.05)
        assert field.evaluate(0.2, [0.45]) == pytest.approx(0.2)
        assert field.evaluate(0.5, [0.0]) == pytest.approx(0.5)

    def test_evaluate_outside_time_range(self):
        spec = ConeSpec(0.0, 0.5, 1.0, 1.0)
        field = solve_cone(ZeroGenerator(), auto_grid(spec, ZeroGenerator(), 0.05), time_boundary)
        with pytest.raises(PreconditionError):
            field.evaluate(1.5, [0.0])

    def test_monotone_in_boundary_data(self):
        spec = ConeSpec(0.0, 0.5, 1.0, 1.0)
        generator = UpperBoundingGenerator(0.5)
        grid = auto_grid(spec, generator, dx=0.05)
        low = solve_cone(generator, grid, lambda s, x: np.cos(3.0 * x[:, 0]))
        high = solve_cone(generator, grid, lambda s, x: np.cos(3.0 * x[:, 0]) + 0.1 * s)
        assert np.all(high.values >= low.values - 1e-12)

    def test_frame_columns(self):
        spec = ConeSpec(0.0, 0.5, 1.0, 1.0)
        frame = solve_cone(ZeroGenerator(), auto_grid(spec, ZeroGenerator(), 0.1), time_boundary).to_frame()
        assert list(frame.columns) == ["s", "x_1", "v"]
        assert (frame["x_1"].abs() <= 0.5 - frame["s"] + 1e-12).all()


class TestConsistency:
    def test_heat_on_quadratic(self):
        spec = ConeSpec(0.0, 0.5, 1.0, 1.0)
        grid = ConeGrid.for_cone(spec, dx=0.05, dt=0.001)
        residual = scheme_residual(
            HeatGenerator(), grid, 0.1,
            lambda x: x[:, 0] ** 2,
            lambda x: (2.0 * x, np.full((x.shape[0], 1, 1), 2.0)),
        )
        assert residual < 1e-8


class TestCylinder:
    def test_boundary_layer_jump(self):
        epsilon, dx = 0.5, 0.01
        field = solve_cylinder(ZeroGenerator(), 0.0, epsilon, epsilon, dx, dx, time_boundary)
        k = field.grid.n_steps - 4
        t_k = float(field.times[k])
        assert field.boundary_gap(k) >= 0.5 * (epsilon - t_k)

    def test_cone_has_no_jump(self):
        spec = ConeSpec(0.0, 0.5, 1.0, 1.0)
        field = solve_cone(ZeroGenerator(), auto_grid(spec, ZeroGenerator(), 0.01), time_boundary)
        assert field.boundary_gap(10) <= 2 * 0.01 + 1e-12


@pytest.mark.slow
class TestBoundingOracle:
    @pytest.mark.parametrize("boundary", [constant_boundary, time_boundary])
    def test_mc_matches_pde(self, boundary, pool):
        spec = ConeSpec(0.0, 0.5, 1.5, 1.0)
        mc = mc_bounding_value(boundary, spec, 0.5, 0.0, 4000, 7, pool=pool)
        pde = solve_bounding_cone(boundary, spec, 0.5, 0.0, dx=0.02).apex_value
        assert abs(mc.value - pde) <= 5e-2 + 3 * mc.stderr

    def test_empty_discount_catalog(self):
        with pytest.raises(ConfigurationError):
            mc_bounding_value(constant_boundary, ConeSpec(0.0, 0.5, 1.5, 1.0), 0.5, 0.0, 10, 0, discounts=[])
