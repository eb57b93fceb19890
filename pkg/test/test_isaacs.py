from dataclasses import replace

import numpy as np
import pytest

from core.paths import Partition, SampledPath
from pipelines.isaacs import (
    GameConfig, GameSpec, brute_force_value, branching_nodes, build_game_tree, cascade_epsilon_sweep, exit_increment,
    extract_strategy, game_cascade_value, game_value_lower, game_value_upper, game_values, isaacs_condition_check,
    saddle_choice, strategy_enrichment_check, value_equality_check,
)
from pipelines.problems import load_problem
from utils.errors import BudgetError, ConfigurationError, DomainError

ORIGIN = SampledPath.zero(0.0, 0.5)


def from_yaml(name, **overrides):
    config = load_problem(name, kind="game")
    return GameSpec.from_config(config), GameConfig.from_config(config.section("game", required=False), **overrides)


class TestGameSpec:
    def test_default_slope(self):
        spec, _ = from_yaml("game_saddle")
        assert spec.L1 == 2.0
        assert spec.shape == (2, 2)

    @pytest.mark.parametrize("changes", [{"T": -1.0}, {"U": ()}, {"L": 0.1}])
    def test_invalid(self, changes):
        spec, _ = from_yaml("game_singleton")
        with pytest.raises(ConfigurationError):
            replace(spec, **changes)

    @pytest.mark.parametrize("kwargs", [{"epsilon": 0.0}, {"depth": 0}, {"samples": 1}, {"branching": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            GameConfig(**kwargs)


class TestBuildingBlocks:
    def test_branching_nodes(self):
        z, w = branching_nodes(3)
        assert w.sum() == pytest.approx(1.0)
        assert float(np.sum(w * z)) == pytest.approx(0.0, abs=1e-12)
        assert float(np.sum(w * z * z)) == pytest.approx(1.0)

    def test_exit_increment_reaches_boundary(self):
        scale = np.array([-1.0, 0.0, 0.5, 2.0])
        v = exit_increment(0.05, scale, 0.2, 2.0)
        assert np.all(v > 0)
        assert np.abs(0.05 + scale * v) + 2.0 * v * v == pytest.approx(np.full(4, 0.2))

    def test_exit_increment_pure_clock(self):
        assert exit_increment(0.0, np.zeros(1), 0.2, 2.0)[0] == pytest.approx(np.sqrt(0.1))

    def test_saddle_choice(self):
        pennies = np.array([[1.0, -1.0], [-1.0, 1.0]])
        assert saddle_choice(pennies, upper=True) == (0, 0)
        assert saddle_choice(pennies, upper=False) == (0, 1)


class TestGameValues:
    def test_saddle(self, pool):
        spec, config = from_yaml("game_saddle")
        values = game_values(spec, 0.0, ORIGIN, config, pool)
        # 鞍点收益 1，剩余时间 0.5
        assert values["upper"].value == pytest.approx(0.5, abs=1e-9)
        assert values["lower"].value == pytest.approx(0.5, abs=1e-9)

    def test_pennies(self, pool):
        spec, config = from_yaml("game_pennies")
        values = game_values(spec, 0.0, ORIGIN, config, pool)
        assert values["upper"].value == pytest.approx(0.5, abs=1e-9)
        assert values["lower"].value == pytest.approx(-0.5, abs=1e-9)

    def test_single_sided_values(self, pool):
        spec, config = from_yaml("game_pennies", depth=1)
        upper = game_value_upper(spec, 0.0, ORIGIN, config, pool)
        lower = game_value_lower(spec, 0.0, ORIGIN, config, pool)
        assert upper.upper and not lower.upper
        assert upper.value - lower.value == pytest.approx(1.0, abs=1e-9)

    def test_singleton_upper_equals_lower(self, pool):
        spec, config = from_yaml("game_singleton", samples=200)
        values = game_values(spec, 0.0, ORIGIN, config, pool)
        assert values["upper"].value == values["lower"].value

    def test_terminal_time(self, pool):
        spec, config = from_yaml("game_saddle")
        tree = build_game_tree(spec, 0.5, ORIGIN, config, pool)
        assert tree.value().value == 0.0
        assert tree.nodes == 1

    def test_path_must_cover_t(self, pool):
        spec, config = from_yaml("game_saddle")
        with pytest.raises(DomainError):
            game_values(spec, 0.4, SampledPath.zero(0.0, 0.2), config, pool)

    def test_worker_count_does_not_matter(self, pool, threaded_pool):
        spec, config = from_yaml("game_singleton", samples=300)
        serial = game_values(spec, 0.0, ORIGIN, config, pool)
        threaded = game_values(spec, 0.0, ORIGIN, config, threaded_pool)
        assert serial["upper"] == threaded["upper"]

    def test_node_budget(self, pool):
        spec, config = from_yaml("game_saddle", max_nodes=10)
        with pytest.raises(BudgetError) as e:
            build_game_tree(spec, 0.0, ORIGIN, config, pool)
        assert e.value.max_depth == 0


class TestStrategies:
    def test_brute_force_matches_backward_induction(self, pool):
        spec, config = from_yaml("game_pennies", depth=1, samples=50)
        tree = build_game_tree(spec, 0.0, ORIGIN, config, pool)
        assert brute_force_value(tree, upper=True) == pytest.approx(tree.value(True).value, abs=1e-12)
        assert brute_force_value(tree, upper=False) == pytest.approx(tree.value(False).value, abs=1e-12)

    def test_brute_force_budget(self, pool):
        spec, config = from_yaml("game_pennies", samples=50)
        tree = build_game_tree(spec, 0.0, ORIGIN, config, pool)
        with pytest.raises(BudgetError) as e:
            brute_force_value(tree)
        assert e.value.max_depth == 1

    def test_best_response_to_current_move(self, pool):
        spec, config = from_yaml("game_pennies", samples=50)
        strategy = extract_strategy(build_game_tree(spec, 0.0, ORIGIN, config, pool), upper=True)
        assert strategy[((), 0)] == 0
        assert strategy[((), 1)] == 1

    def test_non_anticipative(self, pool):
        spec, config = from_yaml("game_pennies", samples=50)
        tree = build_game_tree(spec, 0.0, ORIGIN, config, pool)
        strategy = extract_strategy(tree, upper=True)
        mesh = tree.mesh(upper=True)
        # 第 0 步只读取对手第 0 步的动作
        first = mesh.move(strategy, [(0, 1, 2)], [1, 0], 0)
        assert mesh.move(strategy, [(1, 0, 0)], [1, 1], 0) == first
        history = [(0, 1, 2), (1, 1, 0)]
        assert mesh.move(strategy, history, [1, 0], 1) == mesh.move(strategy, history[:1] + [(0, 0, 0)], [0, 0], 1)


class TestChecks:
    def test_isaacs_condition(self):
        saddle, _ = from_yaml("game_saddle")
        pennies, _ = from_yaml("game_pennies")
        assert isaacs_condition_check(saddle)["success"]
        report = isaacs_condition_check(pennies)
        assert not report["success"]
        assert report["isaacs_gap"] == pytest.approx(2.0)

    def test_equality_only_asserted_under_isaacs(self, pool):
        spec, config = from_yaml("game_pennies", depth=1)
        report = value_equality_check(spec, 0.0, ORIGIN, config, pool)
        assert report["success"]
        assert not report["asserted"]
        assert report["value_gap"] == pytest.approx(1.0, abs=1e-9)

    def test_strategy_enrichment(self, pool):
        spec, config = from_yaml("game_saddle", samples=50)
        assert strategy_enrichment_check(spec, 0.0, ORIGIN, config, pool=pool)["success"]


class TestCascade:
    def test_path_free_game_freezing_is_noop(self, pool):
        spec, config = from_yaml("game_saddle")
        value = game_cascade_value(spec, Partition(epsilon=0.2, dim=1), 0.0, 0.0, config, pool)
        assert value.value == pytest.approx(0.5, abs=1e-9)
        assert value.max_deviation <= config.epsilon + 1e-12

    def test_outside_cone(self, pool):
        spec, config = from_yaml("game_saddle")
        with pytest.raises(DomainError):
            game_cascade_value(spec, Partition(epsilon=0.2, dim=1), 0.1, 0.5, config, pool)

    @pytest.mark.slow
    def test_path_game_deviation_bounded(self, pool):
        spec, config = from_yaml("game_path", samples=500)
        report = cascade_epsilon_sweep(spec, config, epsilons=(0.4, 0.2), pool=pool)
        for row in report["rows"]:
            assert row["max_deviation"] <= row["epsilon"] + 1e-12
