from dataclasses import replace

import numpy as np
import pytest

from core.paths import SampledPath
from pipelines.cascade import (
    LOWER, MODE_PATH, UPPER, CascadeConfig, FrozenProblem, base_continuity_check, cascade_solve, compatibility_report,
    evaluate_u_eps, fit_gap_rate, gap_sweep, modulus_shift, partition_state, propagation_bound, random_path,
    theta_base_lower, theta_base_upper, time_continuity_report, verify_comparison,
)
from pipelines.problems import load_problem
from pipelines.registry import constant, digital, running_max, terminal_square
from solvers.generators import HeatGenerator, ZeroGenerator
from utils.errors import ConfigurationError, DomainError, PreconditionError


def from_yaml(name, **overrides):
    config = load_problem(name, kind="cascade")
    return FrozenProblem.from_config(config), CascadeConfig.from_config(config.section("cascade", required=False),
                                                                        **overrides)


class TestCascadeConfig:
    @pytest.mark.parametrize("kwargs", [
        {"epsilon": 0.0},
        {"epsilon": 0.25, "m": 0},
        {"epsilon": 0.25, "dx": -0.1},
        {"epsilon": 0.25, "quantum": 0.1, "dx": 0.05},
        {"epsilon": 0.25, "mc_samples": 1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            CascadeConfig(**kwargs)

    def test_defaults(self):
        config = CascadeConfig(epsilon=0.2, dx=0.04)
        assert config.quantum == 0.02
        assert config.s_step == 0.05
        assert config.grid_tolerance == 0.04

    def test_overrides_skip_none(self):
        _, config = from_yaml("heat", m=None, mc_samples=300)
        assert config.m == 3
        assert config.mc_samples == 300


class TestFrozenProblem:
    def base(self, **kwargs):
        params = dict(name="p", T=0.5, L=1.0, C0=0.0, generator=ZeroGenerator(), terminal=constant(1.0))
        params.update(kwargs)
        return FrozenProblem(**params)

    def test_default_slope(self):
        assert self.base().L1 == 2.0

    def test_discount_catalog(self):
        assert self.base().discount_catalog == (-1.0, 0.0, 1.0)
        assert self.base(y_independent=True).discount_catalog == (0.0,)
        assert self.base(discounts=[0.5]).discount_catalog == (0.5,)

    @pytest.mark.parametrize("kwargs", [
        {"L1": 0.5},
        {"dim": 2},
        {"problem_class": "markov"},
        {"terminal": running_max()},
        {"generator": HeatGenerator(3.0)},
        {"discounts": [2.0]},
        {"C0": -1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            self.base(**kwargs)

    def test_path_terminal_switches_mode(self):
        problem = self.base().with_terminal(running_max())
        assert problem.problem_class == MODE_PATH


class TestZeroConstant:
    def test_roots_are_exact(self, pool):
        problem, config = from_yaml("zero_constant")
        root = cascade_solve(problem, config, pool).root()
        assert root["upper_root"] == pytest.approx(1.5, abs=1e-12)
        assert root["lower_root"] == pytest.approx(1.5, abs=1e-12)
        assert abs(root["gap"]) <= 1e-12

    def test_u_eps_along_random_paths(self, pool, rng):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        for _ in range(5):
            omega = random_path(rng, problem.T, steps=100)
            t = float(rng.uniform(0.0, problem.T))
            assert evaluate_u_eps(solution, t, omega, UPPER) == pytest.approx(1.5, abs=1e-12)
            assert evaluate_u_eps(solution, t, omega, LOWER) == pytest.approx(1.5, abs=1e-12)

    def test_report_has_level_stats(self, pool):
        problem, config = from_yaml("zero_constant")
        report = cascade_solve(problem, config, pool).report()
        assert [row["level"] for row in report["per_level_stats"]] == [0, 1, 2]
        assert report["mode"] == "markovian-features"

    def test_modulus_shift(self, pool):
        problem, config = from_yaml("zero_constant")
        shifted = modulus_shift(cascade_solve(problem, config, pool), 0.2)
        assert shifted.root()["upper_root"] == pytest.approx(1.5 - 0.2 * problem.T)
        assert modulus_shift(shifted.base, 0.0).root() == shifted.base.root()
        with pytest.raises(PreconditionError):
            modulus_shift(shifted.base, -0.1)

    def test_compatibility(self, pool):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        report = compatibility_report(solution, 0, n_points=10)
        assert report["success"]
        with pytest.raises(PreconditionError):
            compatibility_report(solution, config.m)

    def test_base_representation(self, pool):
        problem, config = from_yaml("zero_constant")
        pi = cascade_solve(problem, config, pool).empty_partition()
        assert theta_base_upper(pi, 0.0, 0.0, problem, config, pool=pool).value == pytest.approx(1.5, abs=1e-12)
        assert theta_base_lower(pi, 0.0, 0.0, problem, config, pool=pool).value == pytest.approx(1.5, abs=1e-12)
        with pytest.raises(DomainError):
            theta_base_upper(pi, 0.1, 0.5, problem, config, pool=pool)

    def test_continuity_diagnostics(self, pool, rng):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        report = time_continuity_report(solution, random_path(rng, problem.T, steps=100))
        assert report["success"]
        assert report["max_jump"] == pytest.approx(0.0, abs=1e-12)
        base = base_continuity_check(solution, n_points=5)
        assert base["success"]
        assert base["max_ratio"] == pytest.approx(0.0, abs=1e-9)
        assert [row["delta"] for row in base["rows"]] == [0.04, 0.02, 0.01]

    def test_base_continuity_flags_jump(self, pool):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem.with_terminal(digital()), config, pool)
        # 终端时刻跨过跳跃点：比值 1/(2δ) 随 δ 变细而翻倍
        report = base_continuity_check(solution, points=[(problem.T, -0.005)])
        assert not report["success"]
        assert report["C"] == pytest.approx(12.5)
        assert [row["ok"] for row in report["rows"]] == [True, True, False]
        assert report["max_ratio"] == pytest.approx(50.0)

    def test_base_continuity_needs_two_deltas(self, pool):
        problem, config = from_yaml("zero_constant")
        with pytest.raises(ConfigurationError):
            base_continuity_check(cascade_solve(problem, config, pool), deltas=(0.01,))

    def test_propagation_bound(self, pool):
        problem, config = from_yaml("zero_constant")
        report = propagation_bound(cascade_solve(problem, config, pool), n=200)
        assert report["success"]
        assert report["base_gap"] == pytest.approx(0.0, abs=1e-12)
        assert 0.0 <= report["hit_probability"] <= 1.0

    def test_bad_variant(self, pool):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        with pytest.raises(ConfigurationError):
            solution.value(solution.empty_partition(), 0.0, 0.0, "middle")


class TestConcurrentFields:
    def test_same_key_solved_once(self, pool, threaded_pool):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        engine = solution._engine(UPPER)
        # 第一个锥在 s = 0.05 的右侧面，r = ε − L1·s = 0.15
        pi = solution.empty_partition().extend(0.05, [0.15])
        before = engine.level_counts.get(1, 0)
        fields = threaded_pool.map_ordered(lambda _: engine.field(pi), range(6))
        assert engine.level_counts[1] - before == 1
        assert all(field is fields[0] for field in fields)
        assert engine.field(pi) is fields[0]
        assert engine.level_counts[1] - before == 1


class TestPartitionState:
    def test_requires_one_dimension(self, pool, walk):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        with pytest.raises(DomainError):
            partition_state(solution, 0.1, walk(T=0.5, dim=2))

    def test_time_beyond_horizon(self, pool):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        with pytest.raises(DomainError):
            partition_state(solution, 0.75, SampledPath.zero(0.0, 1.0))

    def test_zero_path_state(self, pool):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        pi, x = partition_state(solution, 0.3, SampledPath.zero(0.0, problem.T))
        # 斜率 L1 = 2，纯时钟出口每 ε/L1 = 0.125 一次
        assert len(pi) == 2
        assert x == 0.0

    def test_exit_at_t_belongs_to_state(self, pool):
        problem, config = from_yaml("zero_constant")
        solution = cascade_solve(problem, config, pool)
        omega = SampledPath.zero(0.0, problem.T)
        pi, _ = partition_state(solution, 0.25, omega)
        assert list(pi.times) == [0.125, 0.25]
        assert evaluate_u_eps(solution, 0.25, omega) == pytest.approx(1.5, abs=1e-12)


class TestGapRate:
    def test_fit(self):
        fit = fit_gap_rate({1: 0.4, 2: 0.2}, 0.5)
        assert fit["c_hat"] == pytest.approx(0.1)
        assert fit["log_slope"] == pytest.approx(-1.0)

    def test_empty(self):
        with pytest.raises(PreconditionError):
            fit_gap_rate({}, 0.5)


@pytest.mark.slow
class TestHeat:
    def test_sandwich_and_root_at_three_levels(self, pool):
        problem, config = from_yaml("heat")
        assert problem.T == 0.25
        sweep = gap_sweep(problem, config, [1, 2, 3], pool)
        assert sweep["success"], sweep["violations"]
        assert [row["m"] for row in sweep["rows"]] == [1, 2, 3]
        assert abs(sweep["rows"][-1]["root"] - problem.T) <= 0.1

    def test_comparison_under_shift(self, pool):
        problem, config = from_yaml("heat", mc_samples=500)
        config = replace(config, m=1)
        report = verify_comparison(problem, problem.terminal, problem.terminal.shifted(1.0), config, n_points=3,
                                   pool=pool)
        assert report["success"]
        assert report["root_difference_upper"] == pytest.approx(1.0, abs=1e-6)
        assert report["root_difference_lower"] == pytest.approx(1.0, abs=1e-6)

    def test_root_brackets_true_value(self, pool):
        problem, config = from_yaml("heat", mc_samples=1000, m=2)
        solution = cascade_solve(problem, config, pool)
        root = solution.root()
        assert root["lower_root"] - solution.tolerance <= problem.T <= root["upper_root"] + solution.tolerance


@pytest.mark.slow
class TestPathDependent:
    def test_running_max_sandwich(self, pool):
        problem, config = from_yaml("running_max", m=1)
        root = cascade_solve(problem, config, pool).root()
        assert root["lower_root"] <= root["upper_root"] + 3 * config.dx
        assert 0.0 <= root["root"] <= 2.0

    def test_comparison_with_terminal_square(self, pool):
        problem, config = from_yaml("running_max", m=1, mc_samples=200)
        xi = terminal_square()
        report = verify_comparison(problem, xi, xi.shifted(0.5), config, n_points=2, pool=pool)
        assert report["precondition_ok"]
        assert np.isfinite(report["worst_margin"])
