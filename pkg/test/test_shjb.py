import math
from dataclasses import replace

import numpy as np
import pytest

from core.paths import Partition, SampledPath
from pipelines.cascade import random_path
from pipelines.problems import load_problem, resolve_problem_path
from pipelines.registry import make_terminal
from pipelines.shjb import (
    LocalSlice, SHJBConfig, SHJBProblem, _picard_steps, boundedness_check, cascade_state, compare_values,
    control_enrichment_check, epsilon_sweep, shjb_cascade_value, shjb_ppde_residual, simulate_value_direct,
)
from utils.parallel import WorkerPool
from utils.errors import ConfigurationError, DomainError, StencilError


def from_yaml(name, **overrides):
    config = load_problem(name, kind="shjb")
    return SHJBProblem.from_config(config), SHJBConfig.from_config(config.section("shjb", required=False),
                                                                   **overrides)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"epsilon": 0.0},
        {"samples": 1},
        {"picard_depth": 4},
        {"inner_samples": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            SHJBConfig(**kwargs)

    def test_empty_controls(self, tmp_path):
        with open(resolve_problem_path("shjb_drift"), encoding="utf-8") as f:
            text = f.read()
        path = tmp_path / "empty.yaml"
        path.write_text(text.replace("controls: [-1.0, 1.0]", "controls: []"), encoding="utf-8")
        with pytest.raises(ConfigurationError, match="controls"):
            SHJBProblem.from_config(load_problem(str(path)))

    def test_driver_lipschitz_above_L(self):
        problem, _ = from_yaml("shjb_discount")
        with pytest.raises(ConfigurationError):
            replace(problem, L=0.1)


class TestDirectValue:
    def test_drift_control(self, pool):
        problem, config = from_yaml("shjb_drift")
        est = simulate_value_direct(problem, 0.0, SampledPath.zero(0.0, 1.0), 0.3, config, pool)
        assert est.value == pytest.approx(1.3, abs=1e-9)
        assert est.argmax == "1,1"

    def test_discount(self, pool):
        problem, config = from_yaml("shjb_discount")
        est = simulate_value_direct(problem, 0.0, SampledPath.zero(0.0, 1.0), 0.0, config, pool)
        assert est.value == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_terminal_time(self, pool):
        problem, config = from_yaml("shjb_drift")
        est = simulate_value_direct(problem, 1.0, SampledPath.zero(0.0, 1.0), 0.7, config, pool)
        assert est.value == 0.7
        assert est.argmax == "terminal"

    def test_general_driver_runs_three_picard_iterations(self, pool):
        problem, config = from_yaml("shjb_general")
        est = simulate_value_direct(problem, 0.0, SampledPath.zero(0.0, 0.5), 0.0, config, pool)
        # Y¹ = 1，Y² = 1 − (T − r)，Y³ 在 4 个粗节点上左端点求积
        assert est.value == pytest.approx(0.65625, abs=1e-9)
        assert abs(est.value - math.exp(-0.5)) <= 0.06

    def test_picard_steps_follow_step(self, pool):
        problem, config = from_yaml("shjb_general", step=0.05)
        # 10 步向上取到 picard_nodes = 4 的倍数，粗节点仍在 0, 0.125, 0.25, 0.375
        assert _picard_steps(config, 0.0, 0.5) == 12
        assert _picard_steps(config, 0.25, 0.5) == 8
        est = simulate_value_direct(problem, 0.0, SampledPath.zero(0.0, 0.5), 0.0, config, pool)
        assert est.value == pytest.approx(0.65625, abs=1e-9)

    def test_picard_chunks_independent_of_workers(self):
        problem, config = from_yaml("shjb_general", samples=120, step=0.05, picard_depth=2, inner_samples=2)
        problem = replace(problem, terminal=make_terminal("state_plus_path"))
        omega = SampledPath.zero(0.0, 0.5)
        serial = simulate_value_direct(problem, 0.0, omega, 0.0, config, WorkerPool(workers=1, chunk_size=40))
        threaded = simulate_value_direct(problem, 0.0, omega, 0.0, config, WorkerPool(workers=3, chunk_size=40))
        assert serial == threaded
        # 各块随机数不同，样本不再重复
        assert serial.stderr > 0

    def test_path_must_cover_t(self, pool):
        problem, config = from_yaml("shjb_drift")
        with pytest.raises(DomainError):
            simulate_value_direct(problem, 0.8, SampledPath.zero(0.0, 0.5), 0.0, config, pool)

    def test_worker_count_does_not_matter(self, pool, threaded_pool):
        problem, config = from_yaml("shjb_path", samples=5000)
        omega = SampledPath.zero(0.0, 0.5)
        serial = simulate_value_direct(problem, 0.0, omega, 0.0, config, pool)
        threaded = simulate_value_direct(problem, 0.0, omega, 0.0, config, threaded_pool)
        assert serial == threaded


class TestCascadeValue:
    def test_path_free_problem_freezing_is_noop(self, pool, rng):
        problem, config = from_yaml("shjb_drift")
        omega = random_path(rng, problem.T)
        report = compare_values(problem, 0.4, omega, 0.1, config, pool)
        assert report["direct"] == pytest.approx(0.7, abs=1e-9)
        assert report["cascade"] == pytest.approx(report["direct"], abs=1e-12)

    def test_outside_cone(self, pool):
        problem, config = from_yaml("shjb_drift")
        with pytest.raises(DomainError):
            shjb_cascade_value(problem, Partition(epsilon=0.2, dim=1), 0.1, 0.5, 0.0, config, pool)

    def test_cascade_state(self):
        pi, x_bar = cascade_state(SampledPath.zero(0.0, 1.0), 0.45, 0.2, 2.0)
        # 纯时钟出口每 0.1 一次
        assert len(pi) == 4
        assert x_bar == 0.0

    @pytest.mark.slow
    def test_gap_shrinks_with_epsilon(self, pool):
        problem, config = from_yaml("shjb_path", samples=5000)
        omega = random_path(np.random.default_rng(7), problem.T)
        report = epsilon_sweep(problem, 0.1, omega, 0.0, config, pool=pool)
        assert report["success"]
        assert [row["epsilon"] for row in report["rows"]] == [0.4, 0.2, 0.1]


class TestDiagnostics:
    def test_boundedness(self):
        problem, _ = from_yaml("shjb_discount")
        assert boundedness_check(problem, [math.exp(-0.5)])["success"]
        assert not boundedness_check(problem, [5.0])["success"]

    def test_boundedness_skipped_for_unbounded_terminal(self):
        problem, _ = from_yaml("shjb_drift")
        report = boundedness_check(problem, [100.0])
        assert report["success"] and not report["checked"]

    def test_control_enrichment(self, pool):
        problem, config = from_yaml("shjb_drift")
        narrow = problem.with_controls([-1.0])
        report = control_enrichment_check(narrow, [1.0], 0.0, SampledPath.zero(0.0, 1.0), 0.0, config, pool)
        assert report["success"]
        assert report["enriched"] - report["base"] == pytest.approx(2.0, abs=1e-9)

    def test_residual_of_exact_solution(self):
        problem, _ = from_yaml("shjb_drift")
        sl = LocalSlice.from_function(lambda t, b, x: x + (1.0 - t), 0.5, 0.0, 0.2, 0.01, 0.01)
        assert shjb_ppde_residual(problem, sl) == pytest.approx(0.0, abs=1e-9)

    def test_residual_detects_wrong_candidate(self):
        problem, _ = from_yaml("shjb_drift")
        sl = LocalSlice.from_function(lambda t, b, x: x + 0.5 * (1.0 - t), 0.5, 0.0, 0.2, 0.01, 0.01)
        assert shjb_ppde_residual(problem, sl) == pytest.approx(0.5, abs=1e-9)

    def test_stencil_shape(self):
        with pytest.raises(StencilError):
            LocalSlice(np.arange(3.0), np.arange(3.0), np.arange(3.0), np.zeros((2, 3, 3)))
        with pytest.raises(StencilError):
            LocalSlice(np.array([0.0, 0.1, 0.3]), np.arange(3.0), np.arange(3.0), np.zeros((3, 3, 3)))
