import math

import numpy as np
import pytest

from solvers.bsde import affine_bsde_samples, affine_weights
from solvers.nonlinear_expectation import (
    EXHAUSTIVE_LIMIT, ControlLaw, MeasureFamilySpec, column_means, constant_family, default_family, derive_seed,
    hjb_oracle_1d, lower_expectation, sample_mean, simulate_controlled, upper_expectation, wiener_law,
    wiener_mean,
)
from utils.errors import BoundError, ConfigurationError, PreconditionError


def terminal(times, values):
    return values[:, -1, 0]


def terminal_square(times, values):
    return values[:, -1, 0] ** 2


def oracle_grids(L, T, dx, half_width=6.0):
    space = np.arange(-half_width, half_width + dx / 2, dx)
    dt_max = dx * dx / (2.0 * L + L * dx)
    return space, np.linspace(0.0, T, int(math.ceil(T / dt_max)) + 1)


class TestMeasureFamilySpec:
    def test_default_step(self):
        spec = MeasureFamilySpec(L=1.0, T=2.0)
        assert spec.step == pytest.approx(2e-3)
        assert spec.n_steps == 1000
        assert spec.grid[-1] == 2.0

    @pytest.mark.parametrize("kwargs", [
        {"L": 0.0},
        {"L": 1.0, "d": 0},
        {"L": 1.0, "T": 0.0},
        {"L": 1.0, "step": -0.1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            MeasureFamilySpec(**kwargs)

    def test_wiener_membership(self):
        assert MeasureFamilySpec(L=0.5).includes_wiener
        assert not MeasureFamilySpec(L=0.4).includes_wiener

    def test_restricted(self):
        spec = MeasureFamilySpec(L=1.0, T=1.0, step=0.1).restricted(0.5)
        assert spec.grid[0] == 0.5
        assert spec.n_steps == 5


class TestControlLaw:
    def test_drift_bound(self):
        law = ControlLaw(name="fast", drift=[[2.0]], sigma=[0.0])
        with pytest.raises(BoundError):
            law.check_bounds(1.0)

    def test_sigma_bound(self):
        law = ControlLaw(name="loud", drift=[[0.0]], sigma=[1.5])
        with pytest.raises(BoundError):
            law.check_bounds(1.0)
        law.check_bounds(1.2)

    def test_feedback_counts_towards_drift(self):
        law = ControlLaw(name="fb", drift=[[0.6]], sigma=[0.0], feedback_gain=0.6)
        with pytest.raises(BoundError):
            law.check_bounds(1.0)

    def test_segment_mismatch(self):
        with pytest.raises(ConfigurationError):
            ControlLaw(name="bad", drift=[[0.0], [1.0]], sigma=[0.0])

    def test_interval_index(self):
        law = ControlLaw(name="two", drift=[[0.0], [1.0]], sigma=[0.0, 0.0])
        idx = law.interval_index(np.array([0.0, 0.49, 0.5, 1.0]), 0.0, 1.0)
        assert idx.tolist() == [0, 0, 1, 1]


class TestControlFamily:
    def test_constant_family_size(self):
        # 3 个漂移 × 3 个扩散，再加 6 个反馈控制
        assert constant_family(1.0).size == 15
        assert len(constant_family(1.0).enumerate()) == 15

    def test_default_family_is_searched(self):
        assert default_family(1.0).size > EXHAUSTIVE_LIMIT

    def test_laws_respect_bounds(self):
        for law in constant_family(0.7, d=2).enumerate():
            law.check_bounds(0.7)


class TestSimulation:
    def test_deterministic_drift(self):
        spec = MeasureFamilySpec(L=1.0, T=1.0, step=0.1)
        law = ControlLaw(name="b", drift=[[1.0]], sigma=[0.0])
        paths = simulate_controlled(law, spec, seed=0, n=3)
        for path in paths:
            assert path.value_at(1.0)[0] == pytest.approx(1.0)
            assert path.value_at(0.0)[0] == 0.0

    def test_reproducible(self):
        spec = MeasureFamilySpec(L=1.0, T=1.0, step=0.1)
        a = simulate_controlled(wiener_law(), spec, seed=5, n=4)
        b = simulate_controlled(wiener_law(), spec, seed=5, n=4)
        assert all(np.array_equal(p.values, q.values) for p, q in zip(a, b))


class TestUpperExpectation:
    spec = MeasureFamilySpec(L=1.0, T=1.0, step=0.02)

    def test_constant_is_exact(self, pool):
        est = upper_expectation(lambda times, values: np.full(values.shape[0], 2.5), self.spec,
                                constant_family(1.0), 200, 0, pool)
        assert est.value == 2.5
        assert est.stderr == 0.0

    def test_terminal_value(self, pool):
        est = upper_expectation(terminal, self.spec, constant_family(1.0), 2000, 0, pool)
        assert abs(est.value - 1.0) <= max(3 * est.stderr, 0.1)

    def test_lower_is_negated_upper(self, pool):
        est = lower_expectation(terminal, self.spec, constant_family(1.0), 2000, 0, pool)
        assert abs(est.value + 1.0) <= max(3 * est.stderr, 0.1)

    def test_sub_additive(self, pool):
        family = constant_family(1.0)
        up = upper_expectation(terminal, self.spec, family, 500, 3, pool)
        low = lower_expectation(terminal, self.spec, family, 500, 3, pool)
        assert low.value <= up.value

    def test_dominates_wiener(self, pool):
        spec = MeasureFamilySpec(L=0.5, T=1.0, step=0.02)
        up = upper_expectation(terminal_square, spec, constant_family(0.5), 1000, 11, pool)
        plain = wiener_mean(terminal_square, spec, 1000, 11, pool)
        assert up.value >= plain.value
        assert plain.value == pytest.approx(1.0, abs=4 * plain.stderr + 0.02)

    def test_wiener_requires_large_L(self, pool):
        with pytest.raises(PreconditionError):
            wiener_mean(terminal, MeasureFamilySpec(L=0.4), 10, 0, pool)

    def test_empty_family(self, pool):
        with pytest.raises(ConfigurationError):
            upper_expectation(terminal, self.spec, [], 10, 0, pool)

    def test_independent_of_worker_count(self, pool, threaded_pool):
        family = constant_family(1.0)
        serial = upper_expectation(terminal_square, self.spec, family, 5000, 9, pool)
        threaded = upper_expectation(terminal_square, self.spec, family, 5000, 9, threaded_pool)
        assert serial == threaded

    @pytest.mark.slow
    def test_terminal_square_against_oracle(self, pool):
        dx = 0.05
        space, times = oracle_grids(1.0, 1.0, dx)
        oracle = hjb_oracle_1d(lambda x: x ** 2, 1.0, 1.0, space, times)
        est = upper_expectation(terminal_square, self.spec, constant_family(1.0), 2000, 0, pool)
        assert abs(est.value - oracle) <= 3 * est.stderr + 2 * dx


class TestOracle:
    def test_constant(self):
        space, times = oracle_grids(1.0, 1.0, 0.1, half_width=2.0)
        assert hjb_oracle_1d(lambda x: np.full_like(x, 0.7), 1.0, 1.0, space, times) == pytest.approx(0.7)

    def test_linear_terminal(self):
        space, times = oracle_grids(0.5, 1.0, 0.1, half_width=2.0)
        assert hjb_oracle_1d(lambda x: x, 0.5, 1.0, space, times, x0=0.3) == pytest.approx(0.8, abs=1e-9)

    def test_square_exceeds_kinked_candidate_at_origin(self):
        # (|x| + L(T − t))² + 2L(T − t) 在 x = 0 处有凸折角，真实值严格更大
        space, times = oracle_grids(1.0, 1.0, 0.05)
        assert hjb_oracle_1d(lambda x: x ** 2, 1.0, 1.0, space, times) > 3.0

    def test_cfl_violation(self):
        space = np.linspace(-1.0, 1.0, 41)
        with pytest.raises(ConfigurationError):
            hjb_oracle_1d(lambda x: x, 1.0, 1.0, space, np.linspace(0.0, 1.0, 3))

    def test_time_grid_must_end_at_T(self):
        space, times = oracle_grids(1.0, 1.0, 0.1, half_width=1.0)
        with pytest.raises(ConfigurationError):
            hjb_oracle_1d(lambda x: x, 1.0, 2.0, space, times)


class TestSampleStatistics:
    def test_sample_mean(self):
        mean, stderr = sample_mean(np.array([1.0, 2.0, 3.0, 4.0]))
        assert mean == 2.5
        assert stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)

    def test_column_means(self):
        means, stderr = column_means(np.array([[1.0, 5.0], [3.0, 5.0]]))
        assert means.tolist() == [2.0, 5.0]
        assert stderr[1] == 0.0

    def test_derive_seed(self):
        assert derive_seed(1, "omega") == derive_seed(1, "omega")
        assert derive_seed(1, "omega") != derive_seed(2, "omega")
        assert derive_seed(1, 3) != derive_seed(1, 4)
        assert derive_seed(1, -1) >= 0


class TestAffineBsde:
    def test_discount_only(self):
        dt = np.full(10, 0.1)
        samples = affine_bsde_samples(dt, np.array([1.0, 2.0]), np.full((2, 10), 0.5), np.zeros((2, 10)))
        assert samples == pytest.approx([math.exp(0.5), 2 * math.exp(0.5)])

    def test_source_only(self):
        dt = np.full(4, 0.25)
        samples = affine_bsde_samples(dt, np.array([1.0]), np.zeros((1, 4)), np.ones((1, 4)))
        assert samples == pytest.approx([2.0])

    def test_girsanov_weights_have_unit_mean(self, rng):
        n, K = 20000, 10
        dt = np.full(K, 0.1)
        dW = rng.normal(scale=math.sqrt(0.1), size=(n, K, 1))
        weights = affine_weights(dt, np.zeros((n, K)), np.full((n, K, 1), 0.8), dW)
        assert weights[:, 0] == pytest.approx(1.0)
        assert weights[:, -1].mean() == pytest.approx(1.0, abs=0.05)
