import math

import numpy as np
import pytest

from solvers.generators import (
    GENERATORS, HeatGenerator, LinearGenerator, LowerBoundingGenerator, StateSourceGenerator,
    UpperBoundingGenerator, ZeroGenerator, make_generator, make_lower_bounding, make_upper_bounding,
    sandwich_violation,
)
from utils.errors import ConfigurationError


class TestPointEvaluation:
    def test_zero(self):
        assert ZeroGenerator()(0.3, [1.0], 2.0, [3.0], [[4.0]]) == 0.0

    def test_heat(self):
        assert HeatGenerator()(0.0, [0.0], 0.0, [0.0], [[2.0]]) == 1.0

    def test_upper_bounding(self):
        g = UpperBoundingGenerator(L=1.0, C0=0.5)
        value = g(0.0, [0.0, 0.0], -1.0, [3.0, 4.0], [[1.0, 0.0], [0.0, -2.0]])
        # L·1 + L·(1 + 5) + C0
        assert value == pytest.approx(7.5)

    def test_bounding_factories(self):
        upper = make_upper_bounding(1.0, 0.5)
        lower = make_lower_bounding(1.0, 0.5)
        args = (0.0, [0.0, 0.0], -1.0, [3.0, 4.0], [[1.0, 0.0], [0.0, -2.0]])
        assert isinstance(upper, UpperBoundingGenerator)
        assert upper(*args) == pytest.approx(7.5)
        assert lower(*args) == pytest.approx(-8.5)

    def test_lower_bounding(self):
        g = LowerBoundingGenerator(L=1.0, C0=0.5)
        value = g(0.0, [0.0, 0.0], -1.0, [3.0, 4.0], [[1.0, 0.0], [0.0, -2.0]])
        assert value == pytest.approx(-8.5)

    def test_upper_uses_eigenvalues(self):
        # 特征值 ±1，只有正部计入
        g = UpperBoundingGenerator(L=2.0)
        assert g(0.0, [0.0, 0.0], 0.0, [0.0, 0.0], [[0.0, 1.0], [1.0, 0.0]]) == pytest.approx(2.0)

    def test_linear(self):
        g = LinearGenerator(diffusion=0.5, drift=1.0, discount=-0.5, source=0.25)
        assert g(0.0, [0.0], 2.0, [1.0], [[2.0]]) == pytest.approx(1.0 + 1.0 - 1.0 + 0.25)

    def test_state_source_shift(self):
        g = StateSourceGenerator(amplitude=1.0)
        shifted = g.shifted(np.array([math.pi]))
        assert shifted(0.0, [0.0], 0.0, [0.0], [[0.0]]) == pytest.approx(-1.0)
        assert shifted.gamma_lipschitz == g.gamma_lipschitz


class TestLipschitz:
    def test_declared_constants(self):
        g = UpperBoundingGenerator(L=0.7)
        assert g.gamma_lipschitz == g.z_lipschitz == g.y_lipschitz == 0.7
        assert g.lipschitz == 0.7

    def test_linear_constants(self):
        g = LinearGenerator(diffusion=0.2, drift=-1.5, discount=0.3)
        assert (g.gamma_lipschitz, g.z_lipschitz, g.y_lipschitz) == (0.2, 1.5, 0.3)

    def test_describe(self):
        assert HeatGenerator(0.25).describe()["gamma_lipschitz"] == 0.25


class TestFactory:
    def test_known_kinds(self):
        for kind in ("zero", "heat", "linear", "state-source"):
            assert make_generator(kind).name == GENERATORS[kind].name

    def test_bounding_needs_L(self):
        with pytest.raises(ConfigurationError):
            make_generator("upper")
        assert make_generator("upper", L=1.0, C0=0.2).C0 == 0.2

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            make_generator("quadratic")

    @pytest.mark.parametrize("kwargs", [
        {"L": 0.0},
        {"L": 1.0, "C0": -0.1},
    ])
    def test_invalid_bounding_parameters(self, kwargs):
        with pytest.raises(ConfigurationError):
            UpperBoundingGenerator(**kwargs)
        with pytest.raises(ConfigurationError):
            LowerBoundingGenerator(**kwargs)

    def test_negative_diffusion(self):
        with pytest.raises(ConfigurationError):
            LinearGenerator(diffusion=-0.1)


class TestSandwich:
    def test_heat_inside_bounds(self):
        assert sandwich_violation(HeatGenerator(0.5), L=1.0, C0=0.0, dim=2) <= 0.0

    def test_bounding_generators_are_tight(self):
        assert sandwich_violation(UpperBoundingGenerator(1.0, 0.3), L=1.0, C0=0.3) <= 1e-12
        assert sandwich_violation(LowerBoundingGenerator(1.0, 0.3), L=1.0, C0=0.3) <= 1e-12

    def test_heat_outside_bounds(self):
        assert sandwich_violation(HeatGenerator(2.0), L=1.0, C0=0.0) > 0.0

    def test_source_needs_C0(self):
        g = LinearGenerator(source=1.0)
        assert sandwich_violation(g, L=1.0, C0=0.0) > 0.0
        assert sandwich_violation(g, L=1.0, C0=1.0) <= 0.0
