"""
验证套件

每个套件在缩小的规模上跑一组性质检查，返回 {"success": bool, "checks": [...]}。
单项检查失败不抛异常，只在报告里标记；配置或域错误照常抛出。
"""

import math
from dataclasses import replace
from typing import Callable, Dict, List, Optional

import numpy as np

from core.hitting import ConeSpec, hitting_time, markov_restart_check
from core.paths import Partition, SampledPath
from pipelines.cascade import CascadeConfig, FrozenProblem, cascade_solve, gap_sweep, verify_comparison
from pipelines.hitting_stats import regularity_check, tail_probabilities, variant_ordering_check
from pipelines.isaacs import GameConfig, GameSpec, game_cascade_value, value_equality_check
from pipelines.problems import load_problem
from pipelines.shjb import (
    SHJBConfig, SHJBProblem, boundedness_check, compare_values, epsilon_sweep, simulate_value_direct,
)
from solvers.cone_pde import auto_grid, mc_bounding_value, solve_bounding_cone, solve_cone, solve_cylinder
from solvers.generators import ZeroGenerator
from solvers.nonlinear_expectation import (
    MeasureFamilySpec, constant_family, derive_seed, hjb_oracle_1d, upper_expectation,
)
from utils.errors import ConfigurationError
from utils.logger import get_logger
from utils.parallel import WorkerPool, serial_pool

logger = get_logger(name="pipelines.verification")

HEAT_LEVELS = (1, 2, 3)
HEAT_ROOT_TOLERANCE = 0.1


def _check(name: str, success: bool, **details) -> dict:
    if not success:
        logger.warning(f"检查未通过: {name}")
    return {"name": name, "success": bool(success), **details}


def _random_path(rng: np.random.Generator, T: float, steps: int) -> SampledPath:
    times = np.linspace(0.0, T, steps + 1)
    increments = rng.normal(scale=math.sqrt(T / steps), size=steps)
    return SampledPath(times=times, values=np.concatenate([[0.0], np.cumsum(increments)]), t_end=T)


# ----------------------------------------------------------------------
# hitting
# ----------------------------------------------------------------------
def hitting_suite(seed: int = 0, pool: Optional[WorkerPool] = None) -> List[dict]:
    rng = np.random.default_rng(derive_seed(seed, "hitting"))
    failures = 0
    cases = 50
    for _ in range(cases):
        path = _random_path(rng, 1.0, 50)
        spec = ConeSpec(0.0, float(rng.uniform(0.1, 0.5)), 1.5, 1.0)
        x = float(rng.uniform(-0.5, 0.5)) * spec.radius
        hit = hitting_time(path, 0.0, [x], spec).time
        tau = float(rng.uniform(0.0, hit))
        if not markov_restart_check(path, 0.0, [x], spec, tau):
            failures += 1
    checks = [_check("markov_restart", failures == 0, cases=cases, failures=failures)]

    tails = {eps: tail_probabilities(eps, 1.5, T=1.0, n_max=20, samples=2000, seed=seed, step=0.005, pool=pool)
             for eps in (0.4, 0.2)}
    for eps, report in tails.items():
        checks.append(_check(f"tail_probabilities_{eps:g}", report["success"], c_hat=report["c_hat"],
                             monotone=report["monotone"], max_count=report["max_count"],
                             first_fit_violations=report["first_fit_violations"]))
    # 尾界常数不随 ε 缩小而增长
    scaling_ok = tails[0.2]["c_hat"] <= 2.0 * tails[0.4]["c_hat"]
    checks.append(_check("tail_constant_scaling", scaling_ok, c_hat={f"{e:g}": r["c_hat"] for e, r in tails.items()}))

    ordering = variant_ordering_check(0.4, 1.5, T=1.0, samples=50, seed=seed, step=0.01)
    checks.append(_check("variant_ordering", ordering["success"], upper_ok=ordering["upper_ok"],
                         eps1_max=ordering["eps1_max"]))

    regularity = regularity_check(0.5, 1.5, T=1.0, pairs=3, samples=500, seed=seed, step=0.01, pool=pool)
    checks.append(_check("regularity", regularity["success"], pairs=regularity["pairs"]))
    return checks


# ----------------------------------------------------------------------
# nonlin
# ----------------------------------------------------------------------
def _terminal(times, values):
    return values[:, -1, 0]


def _terminal_square(times, values):
    return values[:, -1, 0] ** 2


def nonlin_suite(seed: int = 0, pool: Optional[WorkerPool] = None) -> List[dict]:
    L, T = 1.0, 1.0
    spec = MeasureFamilySpec(L=L, d=1, T=T, step=0.02)
    family = constant_family(L)
    dx = 0.05
    checks = []

    const = upper_expectation(lambda times, values: np.full(values.shape[0], 2.5), spec, family, 200, seed, pool)
    checks.append(_check("constant_preservation", const.value == 2.5, value=const.value))

    linear = upper_expectation(_terminal, spec, family, 2000, seed, pool)
    tolerance = max(3.0 * linear.stderr, 2.0 * dx)
    checks.append(_check("terminal_value", abs(linear.value - L * T) <= tolerance, value=linear.value,
                         expected=L * T, stderr=linear.stderr, argmax=linear.argmax))

    space = np.arange(-6.0, 6.0 + dx / 2, dx)
    dt_max = dx * dx / (2.0 * L + L * dx)
    time_grid = np.linspace(0.0, T, int(math.ceil(T / dt_max)) + 1)
    oracle = hjb_oracle_1d(lambda x: x ** 2, L, T, space, time_grid)
    square = upper_expectation(_terminal_square, spec, family, 2000, seed, pool)
    tolerance = 3.0 * square.stderr + 2.0 * dx
    checks.append(_check("terminal_square_oracle", abs(square.value - oracle) <= tolerance, value=square.value,
                         oracle=oracle, stderr=square.stderr, argmax=square.argmax))
    return checks


# ----------------------------------------------------------------------
# cone
# ----------------------------------------------------------------------
def cone_suite(seed: int = 0, pool: Optional[WorkerPool] = None) -> List[dict]:
    checks = []
    epsilon, dx = 0.5, 1.0 / 200.0
    spec = ConeSpec(0.0, epsilon, 1.0, 1.0)
    generator = ZeroGenerator()
    field = solve_cone(generator, auto_grid(spec, generator, dx), lambda s, x: np.broadcast_to(s, x.shape[:1]))
    worst = 0.0
    for s in np.linspace(0.0, 0.45, 10):
        r = spec.radius_at(s)
        for x in np.linspace(-0.95 * r, 0.95 * r, 21):
            worst = max(worst, abs(field.evaluate(float(s), [float(x)]) - (epsilon - abs(x))))
    checks.append(_check("cone_exact_solution", worst <= 2.0 * dx, max_error=worst, dx=dx))

    dx_cyl = 0.01
    cylinder = solve_cylinder(generator, 0.0, epsilon, epsilon, dx_cyl, dx_cyl,
                              lambda s, x: np.broadcast_to(s, x.shape[:1]))
    k = cylinder.grid.n_steps - 4
    t_k = float(cylinder.times[k])
    jump = cylinder.boundary_gap(k)
    checks.append(_check("cylinder_boundary_layer", jump >= 0.5 * (epsilon - t_k) - 1e-12, jump=jump,
                         t=t_k, threshold=0.5 * (epsilon - t_k)))

    L, C0 = 0.5, 0.0
    bounding_spec = ConeSpec(0.0, 0.5, 1.5, 1.0)
    boundaries: Dict[str, Callable] = {
        "constant": lambda s, x: np.ones(x.shape[0]),
        "time": lambda s, x: np.broadcast_to(s, x.shape[:1]),
    }
    for label, boundary in boundaries.items():
        mc = mc_bounding_value(boundary, bounding_spec, L, C0, 4000, seed, pool=pool)
        pde = solve_bounding_cone(boundary, bounding_spec, L, C0, dx=0.02).apex_value
        tolerance = 5e-2 + 3.0 * mc.stderr
        checks.append(_check(f"bounding_oracle_{label}", abs(mc.value - pde) <= tolerance, mc=mc.value, pde=pde,
                             stderr=mc.stderr, argmax=mc.argmax))
    return checks


# ----------------------------------------------------------------------
# cascade
# ----------------------------------------------------------------------
def _cascade_inputs(name: str, **overrides):
    config = load_problem(name, kind="cascade")
    problem = FrozenProblem.from_config(config)
    return problem, CascadeConfig.from_config(config.section("cascade", required=False), **overrides)


def cascade_suite(seed: int = 0, pool: Optional[WorkerPool] = None) -> List[dict]:
    checks = []
    problem, config = _cascade_inputs("zero_constant", seed=seed)
    root = cascade_solve(problem, config, pool).root()
    # 常数表的双线性插值只引入舍入误差
    exact = abs(root["upper_root"] - 1.5) <= 1e-12 and abs(root["lower_root"] - 1.5) <= 1e-12
    checks.append(_check("constant_terminal_exact", exact, **root))

    # 验收时域 T = 0.25，真解 u(0, 0) = T
    problem, config = _cascade_inputs("heat", seed=seed)
    sweep = gap_sweep(problem, config, HEAT_LEVELS, pool)
    checks.append(_check("heat_sandwich", sweep["success"], rows=sweep["rows"], violations=sweep["violations"]))
    deepest = sweep["rows"][-1]
    checks.append(_check("heat_root", abs(deepest["root"] - problem.T) <= HEAT_ROOT_TOLERANCE, m=deepest["m"],
                         root=deepest["root"], target=problem.T, tolerance=HEAT_ROOT_TOLERANCE))

    config = replace(config, m=1, mc_samples=500)
    report = verify_comparison(problem, problem.terminal, problem.terminal.shifted(1.0), config, n_points=3,
                               pool=pool)
    shift_ok = abs(report["root_difference_upper"] - 1.0) <= report["tolerance"] + config.grid_tolerance
    checks.append(_check("comparison", report["success"] and shift_ok, worst_margin=report["worst_margin"],
                         root_difference_upper=report["root_difference_upper"],
                         root_difference_lower=report["root_difference_lower"]))
    return checks


# ----------------------------------------------------------------------
# shjb
# ----------------------------------------------------------------------
def _shjb_inputs(name: str, **overrides):
    config = load_problem(name, kind="shjb")
    problem = SHJBProblem.from_config(config)
    return problem, SHJBConfig.from_config(config.section("shjb", required=False), **overrides)


def shjb_suite(seed: int = 0, pool: Optional[WorkerPool] = None) -> List[dict]:
    checks = []
    problem, config = _shjb_inputs("shjb_drift", seed=seed)
    omega = SampledPath.zero(0.0, problem.T)
    drift = simulate_value_direct(problem, 0.0, omega, 0.0, config, pool)
    expected = problem.T
    checks.append(_check("drift_closed_form", abs(drift.value - expected) <= 3.0 * drift.stderr + 1e-9,
                         value=drift.value, expected=expected, argmax=drift.argmax))

    frozen = compare_values(problem, 0.0, omega, 0.0, config, pool)
    checks.append(_check("freezing_no_op", frozen["direct"] == frozen["cascade"], direct=frozen["direct"],
                         cascade=frozen["cascade"]))

    problem, config = _shjb_inputs("shjb_discount", seed=seed)
    discount = simulate_value_direct(problem, 0.0, SampledPath.zero(0.0, problem.T), 0.0, config, pool)
    expected = math.exp(-0.5 * problem.T)
    checks.append(_check("discount_closed_form", abs(discount.value - expected) <= 3.0 * discount.stderr + 1e-9,
                         value=discount.value, expected=expected))
    bounded = boundedness_check(problem, [discount.value])
    checks.append(_check("boundedness", bounded["success"], bound=bounded["bound"]))

    problem, config = _shjb_inputs("shjb_path", seed=seed, samples=5000)
    sweep = epsilon_sweep(problem, 0.0, SampledPath.zero(0.0, problem.T), 0.0, config, pool=pool)
    checks.append(_check("cascade_gap_decreasing", sweep["success"], rows=sweep["rows"]))
    return checks


# ----------------------------------------------------------------------
# isaacs
# ----------------------------------------------------------------------
def _game_inputs(name: str, **overrides):
    config = load_problem(name, kind="game")
    spec = GameSpec.from_config(config)
    return spec, GameConfig.from_config(config.section("game", required=False), **overrides)


def isaacs_suite(seed: int = 0, pool: Optional[WorkerPool] = None) -> List[dict]:
    checks = []
    spec, config = _game_inputs("game_saddle", seed=seed)
    omega = SampledPath.zero(0.0, spec.T)
    saddle = value_equality_check(spec, 0.0, omega, config, pool)
    expected = spec.T * 1.0
    close = all(abs(saddle[key] - expected) <= 3.0 * saddle[f"{key}_stderr"] + 1e-9 for key in ("upper", "lower"))
    checks.append(_check("saddle_value", saddle["success"] and close, upper=saddle["upper"], lower=saddle["lower"],
                         expected=expected))

    spec, config = _game_inputs("game_pennies", seed=seed)
    pennies = value_equality_check(spec, 0.0, SampledPath.zero(0.0, spec.T), config, pool)
    checks.append(_check("pennies_isaacs_gap", pennies["isaacs_gap"] > 0 and pennies["ordered"],
                         isaacs_gap=pennies["isaacs_gap"], upper=pennies["upper"], lower=pennies["lower"]))

    spec, config = _game_inputs("game_singleton", seed=seed, samples=200)
    singleton = value_equality_check(spec, 0.0, SampledPath.zero(0.0, spec.T), config, pool)
    checks.append(_check("singleton_equal_values", singleton["asserted"] and singleton["value_gap"] == 0.0,
                         upper=singleton["upper"], lower=singleton["lower"]))

    spec, config = _game_inputs("game_path", seed=seed, samples=200)
    value = game_cascade_value(spec, Partition(epsilon=config.epsilon, dim=1), 0.0, 0.0, config, pool)
    checks.append(_check("frozen_deviation", value.max_deviation <= config.epsilon + 1e-12,
                         max_deviation=value.max_deviation, epsilon=config.epsilon))
    return checks


SUITES: Dict[str, Callable[..., List[dict]]] = {
    "hitting": hitting_suite,
    "nonlin": nonlin_suite,
    "cone": cone_suite,
    "cascade": cascade_suite,
    "shjb": shjb_suite,
    "isaacs": isaacs_suite,
}


def run_suite(name: str, seed: int = 0, pool: Optional[WorkerPool] = None) -> dict:
    """
    运行单个套件或 all

    返回:
        {"success": bool, "suites": {名称: {"success", "checks"}}}
    """
    if name != "all" and name not in SUITES:
        raise ConfigurationError(f"未知验证套件: {name}，可选 {sorted(SUITES) + ['all']}")
    pool = pool or serial_pool()
    names = list(SUITES) if name == "all" else [name]
    suites = {}
    for label in names:
        logger.info(f"开始验证套件: {label}")
        checks = SUITES[label](seed=seed, pool=pool)
        passed = all(check["success"] for check in checks)
        suites[label] = {"success": passed, "checks": checks}
        logger.info(f"验证套件 {label}: {'通过' if passed else '失败'} ({sum(c['success'] for c in checks)}/{len(checks)})")
    return {"success": all(entry["success"] for entry in suites.values()), "suite": name, "seed": seed,
            "suites": suites}
