"""
伪马氏级联

把路径依赖 PDE 的解近似为 ε-马氏族 {v_n}：第 n 层在以最后命中点为顶点的锥上
求解冻结 PDE，侧面边界值取自第 n+1 层的锥顶值（兼容条件），第 m 层取上/下界方程
的概率表示。上、下两条级联夹住真解，二者之差随 m 增大而收缩。

两种模式：
1. markovian-features：ξ 只依赖终端值、生成元只依赖当前值，v_n 只经 (t_n, Σx_j) 依赖划分，
   各层压缩成 (t, S) 上的二维表
2. path-dependent：按需递归，锥侧面只在少量时间节点上取下一层的值，结果按量化键缓存
"""

import math
import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from core.hitting import (
    OUTSIDE, ConeSpec, batch_hitting_sequence, cone_classify, hitting_sequence, interpolate_knots,
    partition_state as hitting_partition_state,
)
from core.paths import Partition, SampledPath
from pipelines.problems import ProblemConfig
from pipelines.registry import PathFunctional, make_functional
from solvers.cone_pde import ValueField, auto_grid, solve_cone
from solvers.generators import Generator, make_generator, sandwich_violation
from solvers.nonlinear_expectation import (
    ControlledSampler, MCEstimate, MeasureFamilySpec, column_means, constant_family, derive_seed, sample_mean,
)
from utils.errors import BudgetError, ConfigurationError, DomainError, PreconditionError
from utils.logger import get_logger
from utils.parallel import WorkerPool, serial_pool

logger = get_logger(name="pipelines.cascade")

MODE_FEATURES = "markovian-features"
MODE_PATH = "path-dependent"
PROBLEM_CLASSES = (MODE_FEATURES, MODE_PATH)

UPPER = "upper"
LOWER = "lower"

DOMAIN_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CascadeConfig:
    """
    epsilon:          锥半径 ε
    m:                截断层数
    dx, dt:           锥网格步长，dt 缺省取 CFL 允许的最大值
    t_nodes:          特征表的时间节点数
    s_step:           特征表的状态步长，默认 ε/4
    boundary_samples: 路径依赖模式下每侧的侧面采样点数
    quantum:          缓存键量子 q，默认 dx/2
    mc_samples:       底层蒙特卡洛样本数
    mc_step:          底层 Euler 步长，默认 T/100
    seed:             主种子
    max_solves:       锥求解与底层估计的总预算
    grid_tolerance:   排序检查使用的网格容差，默认 dx
    """
    epsilon: float
    m: int = 3
    dx: float = 0.05
    dt: Optional[float] = None
    t_nodes: int = 11
    s_step: Optional[float] = None
    boundary_samples: int = 4
    quantum: Optional[float] = None
    mc_samples: int = 2000
    mc_step: Optional[float] = None
    seed: int = 0
    max_solves: int = 20000
    grid_tolerance: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"ε 必须为正: {self.epsilon}")
        if self.m < 1:
            raise ConfigurationError(f"截断层数 m 必须 >= 1: {self.m}")
        if not self.dx > 0:
            raise ConfigurationError(f"dx 必须为正: {self.dx}")
        if self.dt is not None and not self.dt > 0:
            raise ConfigurationError(f"dt 必须为正: {self.dt}")
        if self.t_nodes < 2:
            raise ConfigurationError(f"特征表时间节点数必须 >= 2: {self.t_nodes}")
        if self.boundary_samples < 2:
            raise ConfigurationError(f"侧面采样点数必须 >= 2: {self.boundary_samples}")
        if self.mc_samples < 2:
            raise ConfigurationError(f"蒙特卡洛样本数必须 >= 2: {self.mc_samples}")
        quantum = self.dx / 2.0 if self.quantum is None else float(self.quantum)
        if not 0 < quantum <= self.dx / 2.0 + 1e-15:
            raise ConfigurationError(f"缓存量子必须满足 0 < q <= dx/2: q={quantum}, dx={self.dx}")
        object.__setattr__(self, "quantum", quantum)
        if self.s_step is None:
            object.__setattr__(self, "s_step", self.epsilon / 4.0)
        if self.grid_tolerance is None:
            object.__setattr__(self, "grid_tolerance", self.dx)

    def step_for(self, T: float) -> float:
        return T / 100.0 if self.mc_step is None else float(self.mc_step)

    @classmethod
    def from_config(cls, section: ProblemConfig, **overrides) -> "CascadeConfig":
        """从 YAML 的 cascade 段读取默认值，命令行参数覆盖（值为 None 的覆盖项忽略）"""
        section.check_keys(["epsilon", "m", "dx", "dt", "t_nodes", "s_step", "boundary_samples", "quantum",
                            "samples", "mc_step", "seed", "max_solves", "grid_tolerance"])
        values = {
            "epsilon": section.get("epsilon", 0.25, kind=float, positive=True),
            "m": section.get("m", 3, kind=int, positive=True),
            "dx": section.get("dx", 0.05, kind=float, positive=True),
            "dt": section.get("dt", None, kind=float, positive=True),
            "t_nodes": section.get("t_nodes", 11, kind=int, positive=True),
            "s_step": section.get("s_step", None, kind=float, positive=True),
            "boundary_samples": section.get("boundary_samples", 4, kind=int, positive=True),
            "quantum": section.get("quantum", None, kind=float, positive=True),
            "mc_samples": section.get("samples", 2000, kind=int, positive=True),
            "mc_step": section.get("mc_step", None, kind=float, positive=True),
            "seed": section.get("seed", 0, kind=int, nonnegative=True),
            "max_solves": section.get("max_solves", 20000, kind=int, positive=True),
            "grid_tolerance": section.get("grid_tolerance", None, kind=float, nonnegative=True),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True, eq=False)
class FrozenProblem:
    """
    级联问题

    generator:     状态形式的生成元，x 为冻结路径的绝对当前值；冻结族为 generator.shifted(Σx_j)
    terminal:      终端泛函 ξ
    L, C0:         上下界方程的常数
    L1:            锥斜率，缺省 L + 1
    problem_class: markovian-features / path-dependent（声明，不做内省）
    y_independent: 生成元不依赖 y 时底层折现目录只取 {0}
    discounts:     显式折现目录，覆盖默认值
    """
    name: str
    T: float
    L: float
    C0: float
    generator: Generator
    terminal: PathFunctional
    L1: Optional[float] = None
    problem_class: str = MODE_FEATURES
    y_independent: bool = False
    discounts: Optional[Tuple[float, ...]] = None
    dim: int = 1

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError(f"T 必须为正: {self.T}")
        if not self.L > 0:
            raise ConfigurationError(f"L 必须为正: {self.L}")
        if self.C0 < 0:
            raise ConfigurationError(f"C0 必须非负: {self.C0}")
        if self.L1 is None:
            object.__setattr__(self, "L1", self.L + 1.0)
        if self.L1 < 1:
            raise ConfigurationError(f"L1 必须 >= 1: {self.L1}")
        if self.problem_class not in PROBLEM_CLASSES:
            raise ConfigurationError(f"未知问题类型: {self.problem_class}，可选 {list(PROBLEM_CLASSES)}")
        if self.dim != 1:
            raise ConfigurationError(f"级联只支持 d = 1: {self.dim}")
        if self.problem_class == MODE_FEATURES and not self.terminal.terminal_only:
            raise ConfigurationError(f"{MODE_FEATURES} 问题要求终端泛函只依赖终端值: {self.terminal.name}")
        worst = sandwich_violation(self.generator, self.L, self.C0, dim=self.dim)
        if worst > 1e-9:
            raise ConfigurationError(
                f"生成元 {self.generator.name} 不满足 g̲ ≤ G ≤ ḡ (L={self.L}, C0={self.C0})，越界 {worst:.3g}")
        if self.discounts is not None:
            object.__setattr__(self, "discounts", tuple(float(b) for b in self.discounts))
            if not self.discounts or any(abs(b) > self.L + 1e-12 for b in self.discounts):
                raise ConfigurationError(f"折现目录必须非空且 |b| <= L: {self.discounts}")

    @property
    def discount_catalog(self) -> Tuple[float, ...]:
        if self.discounts is not None:
            return self.discounts
        return (0.0,) if self.y_independent else (-self.L, 0.0, self.L)

    def frozen_generator(self, pi: Partition) -> Generator:
        """冻结路径 ω^{π_n} 对应的生成元"""
        return self.generator.shifted(pi.position)

    def with_terminal(self, terminal: PathFunctional) -> "FrozenProblem":
        problem_class = self.problem_class if terminal.terminal_only else MODE_PATH
        return replace(self, terminal=terminal, problem_class=problem_class)

    @classmethod
    def from_config(cls, config: ProblemConfig) -> "FrozenProblem":
        config.check_keys(["kind", "name", "description", "T", "L", "L1", "C0", "problem_class", "y_independent",
                           "discounts", "generator", "terminal", "cascade"])
        L = config.get("L", required=True, kind=float, positive=True)
        generator_section = config.section("generator")
        terminal_section = config.section("terminal")
        try:
            generator = make_generator(generator_section.get("type", required=True, kind=str),
                                       **generator_section.params())
        except ConfigurationError as e:
            generator_section.fail("type", str(e))
        try:
            terminal = make_functional(terminal_section.get("type", required=True, kind=str),
                                       **terminal_section.params())
        except ConfigurationError as e:
            terminal_section.fail("type", str(e))
        discounts = config.get("discounts", None, kind=list)
        try:
            return cls(
                name=config.get("name", config.source, kind=str),
                T=config.get("T", required=True, kind=float, positive=True),
                L=L,
                C0=config.get("C0", 0.0, kind=float, nonnegative=True),
                L1=config.get("L1", L + 1.0, kind=float, positive=True),
                generator=generator,
                terminal=terminal,
                problem_class=config.get("problem_class", MODE_FEATURES, kind=str),
                y_independent=config.get("y_independent", False, kind=bool),
                discounts=None if discounts is None else tuple(discounts),
            )
        except ConfigurationError as e:
            config.fail(None, str(e))


# ----------------------------------------------------------------------
# 底层：上下界方程的概率表示
# ----------------------------------------------------------------------
def _discounted(mean, b: float, tau: float, c0: float):
    """e^{bτ}·mean + c0·∫_0^τ e^{bs} ds"""
    running = c0 * (math.expm1(b * tau) / b if b != 0 else tau)
    return math.exp(b * tau) * mean + running


def _prefix_knots(pi: Partition) -> Tuple[np.ndarray, np.ndarray]:
    """冻结插值路径 ω^{π_n} 的节点 (0, 0), (t_i, Σ_{j≤i} x_j)"""
    times = np.concatenate([[0.0], pi.times])
    values = np.concatenate([[0.0], np.cumsum(pi.increments[:, 0])]) if len(pi) else np.zeros(1)
    return times, values


def frozen_terminal(problem: FrozenProblem, pi: Partition, x: np.ndarray) -> np.ndarray:
    """ξ(ω^{π_n ⊕ (T, x)})，x 为 (N,) 相对最后划分点的增量"""
    x = np.asarray(x, dtype=float).reshape(-1)
    S = float(pi.position[0])
    if problem.terminal.terminal_only:
        return np.asarray(problem.terminal.terminal_map((S + x)[:, None]), dtype=float)
    times, values = _prefix_knots(pi)
    if times[-1] >= problem.T:
        raise PreconditionError(f"划分最后时刻 {times[-1]} 不早于 T={problem.T}")
    grid = np.append(times, problem.T)
    paths = np.empty((x.shape[0], grid.shape[0], 1))
    paths[:, :-1, 0] = values[None, :]
    paths[:, -1, 0] = S + x
    return problem.terminal(grid, paths)


def check_point(problem: FrozenProblem, epsilon: float, pi: Partition, t: float, x: float):
    """(π_n, t, x) ∈ D_{n+1}：以最后划分点为顶点的闭锥"""
    if pi.dim != 1:
        raise DomainError(f"级联只支持 d = 1，划分维度为 {pi.dim}")
    t_n = pi.last_time()
    if t < t_n or t > problem.T:
        raise DomainError(f"t={t} 不在 [{t_n}, {problem.T}] 内")
    spec = ConeSpec(t_n, epsilon, problem.L1, problem.T)
    if cone_classify(spec, t, [x], tolerance=DOMAIN_TOLERANCE) == OUTSIDE:
        raise DomainError(f"(t={t}, x={x}) 在以 t_n={t_n} 为顶点的锥外")


def _base_estimate(problem: FrozenProblem, config: CascadeConfig, pi: Partition, t: float, x: float,
                   upper: bool, seed: int, pool: Optional[WorkerPool]) -> MCEstimate:
    """
    sup_b sup_P E[e^{b(T−t)}ξ(B^{ε,π,t,x}) + C0·∫e^{bs}ds]（lower 为 inf 与 −C0）

    B^{ε,π,t,x}：前缀为 ω^{π}，t 之后的模拟路径在自身命中序列处折断后线性插值。
    """
    T = problem.T
    sign = 1.0 if upper else -1.0
    c0 = sign * problem.C0
    S = float(pi.position[0])
    if t >= T:
        value = float(frozen_terminal(problem, pi, np.array([x]))[0])
        return MCEstimate(value=value, stderr=0.0, n_samples=config.mc_samples, argmax="terminal")

    spec = MeasureFamilySpec(L=problem.L, d=1, T=T, t0=t, step=config.step_for(T))
    sampler = ControlledSampler(spec, config.mc_samples, seed, pool)
    t_n = pi.last_time()
    eps, slope = config.epsilon, problem.L1

    if problem.terminal.terminal_only:
        phi = problem.terminal.terminal_map

        def functional(grid, paths):
            return phi(S + x + paths[:, -1, :])
    else:
        prefix_t, prefix_v = _prefix_knots(pi)
        eval_grid = np.union1d(prefix_t, spec.grid)

        def functional(grid, paths):
            n = paths.shape[0]
            seq = batch_hitting_sequence(grid, paths, eps, slope, x0=np.array([x]), K0=eps + slope * t_n)
            knot_times = np.concatenate([np.broadcast_to(prefix_t, (n, prefix_t.shape[0])),
                                         seq.knot_times[:, 1:]], axis=1)
            knot_values = np.concatenate([np.broadcast_to(prefix_v[None, :, None], (n, prefix_v.shape[0], 1)),
                                          S + x + seq.knot_values[:, 1:, :]], axis=1)
            return problem.terminal(eval_grid, interpolate_knots(eval_grid, knot_times, knot_values))

    tau = T - t
    best = None
    for law in constant_family(problem.L, d=1).constant_laws():
        mean, stderr = sample_mean(sampler.samples(functional, law))
        for b in problem.discount_catalog:
            value = _discounted(mean, b, tau, c0)
            if best is None or sign * value > sign * best[0]:
                best = (value, stderr * math.exp(b * tau), f"{law.name}|b={b:g}")
    return MCEstimate(value=best[0], stderr=best[1], n_samples=config.mc_samples, argmax=best[2])


def _base_seed(config: CascadeConfig, pi: Partition, t: float, x: float) -> int:
    q = config.quantum
    keys = [k for point in pi.key(q) for k in point]
    return derive_seed(config.seed, "base", len(pi), int(round(t / q)), int(round(x / q)), *keys)


def theta_base_upper(pi: Partition, t: float, x: float, problem: FrozenProblem, config: CascadeConfig,
                     seed: Optional[int] = None, pool: Optional[WorkerPool] = None) -> MCEstimate:
    """
    上界方程在 (π_n, t, x) 的概率表示 θ̄

    :param seed: 缺省时由 (config.seed, 量化后的点) 派生，上下两侧使用相同随机数
    """
    check_point(problem, config.epsilon, pi, t, x)
    seed = _base_seed(config, pi, t, x) if seed is None else seed
    return _base_estimate(problem, config, pi, t, x, True, seed, pool)


def theta_base_lower(pi: Partition, t: float, x: float, problem: FrozenProblem, config: CascadeConfig,
                     seed: Optional[int] = None, pool: Optional[WorkerPool] = None) -> MCEstimate:
    """下界方程的概率表示 θ̲（inf 与 −C0）"""
    check_point(problem, config.epsilon, pi, t, x)
    seed = _base_seed(config, pi, t, x) if seed is None else seed
    return _base_estimate(problem, config, pi, t, x, False, seed, pool)


# ----------------------------------------------------------------------
# 求值引擎
# ----------------------------------------------------------------------
class _Engine:
    """单侧（upper 或 lower）级联的求值器，锥解按量化键缓存"""

    def __init__(self, problem: FrozenProblem, config: CascadeConfig, upper: bool, pool: WorkerPool):
        self.problem = problem
        self.config = config
        self.upper = upper
        self.variant = UPPER if upper else LOWER
        self.pool = pool
        self._fields: Dict[tuple, ValueField] = {}
        self._lock = threading.Lock()
        self._table_lock = threading.Lock()
        self._key_locks: Dict[tuple, threading.Lock] = {}
        self.solves = 0
        self.deepest_level = 0
        self.max_stderr = 0.0
        self.level_counts: Dict[int, int] = {}

    def _cone(self, t0: float) -> ConeSpec:
        return ConeSpec(t0, self.config.epsilon, self.problem.L1, self.problem.T)

    def _charge(self, level: int):
        with self._lock:
            self.solves += 1
            self.deepest_level = max(self.deepest_level, level)
            self.level_counts[level] = self.level_counts.get(level, 0) + 1
            if self.solves > self.config.max_solves:
                raise BudgetError(
                    f"级联求解次数超过预算 {self.config.max_solves}，已到达第 {self.deepest_level} 层",
                    deepest_level=self.deepest_level)

    def _solve(self, t0: float, anchor: float, boundary, level: int) -> ValueField:
        self._charge(level)
        spec = self._cone(t0)
        generator = self.problem.generator.shifted(np.array([anchor]))
        grid = auto_grid(spec, generator, self.config.dx, self.config.dt)
        return solve_cone(generator, grid, boundary)

    def _once(self, store: dict, key: tuple, build):
        """同一个键只构建一次；构建期间持有该键的锁，构建内部可递归求更深的键"""
        value = store.get(key)
        if value is not None:
            return value
        with self._lock:
            key_lock = self._key_locks.setdefault((id(store), key), threading.Lock())
        with key_lock:
            value = store.get(key)
            if value is None:
                value = build()
                store[key] = value
        return value

    def _memo(self, key: tuple, build) -> ValueField:
        return self._once(self._fields, key, build)

    def value(self, pi: Partition, t: float, x: float) -> float:
        if len(pi) >= self.config.m:
            return self.base_value(pi, t, x)
        return self.field(pi).evaluate(t, [x])

    def grid_value(self, pi: Partition, s: float, x: float) -> float:
        """不经边界数据的网格插值（兼容性检查用）"""
        return self.field(pi).interpolate(s, [x])

    def field(self, pi: Partition) -> ValueField:
        raise NotImplementedError

    def base_value(self, pi: Partition, t: float, x: float) -> float:
        raise NotImplementedError

    def base_values(self) -> Dict[tuple, float]:
        raise NotImplementedError


class _FeatureEngine(_Engine):
    """
    markovian-features 模式

    W_n(t', S') = v_n 在锥顶 (t', 0)、冻结当前值 S' 处的值；第 m 层为底层表示，
    第 n < m 层以 W_{n+1} 为侧面数据求锥。表在 (t, S) 上双线性插值，S 超出范围时截断。
    """

    def __init__(self, problem, config, upper, pool):
        super().__init__(problem, config, upper, pool)
        self.t_grid = np.linspace(0.0, problem.T, config.t_nodes)
        half = int(math.ceil((config.m + 1) * config.epsilon / config.s_step))
        self.s_grid = np.arange(-half, half + 1) * config.s_step
        self.tables: Dict[int, np.ndarray] = {}
        self._interpolators: Dict[int, RegularGridInterpolator] = {}

    def _store(self, level: int, table: np.ndarray):
        self.tables[level] = table
        self._interpolators[level] = RegularGridInterpolator(
            (self.t_grid, self.s_grid), table, method="linear", bounds_error=False, fill_value=None)

    def table_value(self, level: int, s, S) -> np.ndarray:
        self.ensure_table(level)
        s = np.clip(np.asarray(s, dtype=float), self.t_grid[0], self.t_grid[-1])
        S = np.clip(np.asarray(S, dtype=float), self.s_grid[0], self.s_grid[-1])
        s, S = np.broadcast_arrays(s, S)
        return self._interpolators[level](np.stack([s.reshape(-1), S.reshape(-1)], axis=1)).reshape(s.shape)

    def ensure_table(self, level: int):
        if level in self.tables:
            return
        if level < self.config.m:
            self.ensure_table(level + 1)
        with self._table_lock:
            if level in self.tables:
                return
            table = self._build_base() if level >= self.config.m else self._build_level(level)
            self._store(level, table)

    def _boundary(self, S: float, level: int):
        """锥 (t', S) 上的边界数据：终端用 φ，侧面用 W_{level+1}"""
        phi = self.problem.terminal.terminal_map
        T = self.problem.T

        def boundary(s, x):
            s = np.broadcast_to(np.asarray(s, dtype=float), (x.shape[0],))
            absolute = S + x[:, 0]
            out = np.asarray(self.table_value(level + 1, s, absolute), dtype=float).copy()
            terminal = s >= T
            if terminal.any():
                out[terminal] = phi(absolute[terminal][:, None])
            return out

        return boundary

    def _build_level(self, level: int) -> np.ndarray:
        phi = self.problem.terminal.terminal_map
        T = self.problem.T
        nodes = [(i, j) for i in range(self.t_grid.shape[0]) for j in range(self.s_grid.shape[0])]

        def node_value(node):
            i, j = node
            t, S = float(self.t_grid[i]), float(self.s_grid[j])
            if t >= T:
                return float(phi(np.array([[S]]))[0])
            return self._solve(t, S, self._boundary(S, level), level).apex_value

        values = self.pool.map_ordered(node_value, nodes)
        table = np.array(values, dtype=float).reshape(self.t_grid.shape[0], self.s_grid.shape[0])
        logger.debug(f"[{self.variant}] 第 {level} 层特征表完成: 形状 {table.shape}")
        return table

    def _build_base(self) -> np.ndarray:
        problem, config = self.problem, self.config
        phi = problem.terminal.terminal_map
        T = problem.T
        sign = 1.0 if self.upper else -1.0
        c0 = sign * problem.C0
        laws = constant_family(problem.L, d=1).constant_laws()
        rows = []
        for i, t in enumerate(self.t_grid):
            if t >= T:
                rows.append(np.asarray(phi(self.s_grid[:, None]), dtype=float))
                continue
            self._charge(config.m)
            spec = MeasureFamilySpec(L=problem.L, d=1, T=T, t0=float(t), step=config.step_for(T))
            sampler = ControlledSampler(spec, config.mc_samples, derive_seed(config.seed, "base-table", i), self.pool)
            tau = T - float(t)
            best = None
            for law in laws:
                endpoint = sampler.samples(lambda grid, paths: paths[:, -1, 0], law)
                shifted = (self.s_grid[None, :] + endpoint[:, None]).reshape(-1, 1)
                means, stderr = column_means(np.asarray(phi(shifted), dtype=float).reshape(endpoint.shape[0], -1))
                for b in problem.discount_catalog:
                    candidate = _discounted(means, b, tau, c0)
                    best = candidate if best is None else (np.maximum(best, candidate) if self.upper
                                                           else np.minimum(best, candidate))
                    self.max_stderr = max(self.max_stderr, float(np.max(stderr)) * math.exp(abs(b) * tau))
            rows.append(best)
        logger.debug(f"[{self.variant}] 底层特征表完成: t 节点 {len(rows)}, S 节点 {self.s_grid.shape[0]}")
        return np.vstack(rows)

    def field(self, pi: Partition) -> ValueField:
        level = len(pi)
        q = self.config.quantum
        t_n = pi.last_time()
        S = float(pi.position[0])
        key = (level, int(round(t_n / q)), int(round(S / q)))
        self.ensure_table(level + 1)
        return self._memo(key, lambda: self._solve(t_n, S, self._boundary(S, level), level))

    def base_value(self, pi: Partition, t: float, x: float) -> float:
        S = float(pi.position[0])
        if t >= self.problem.T:
            return float(self.problem.terminal.terminal_map(np.array([[S + x]]))[0])
        return float(self.table_value(self.config.m, t, S + x))

    def base_values(self) -> Dict[tuple, float]:
        self.ensure_table(self.config.m)
        table = self.tables[self.config.m]
        return {(i, j): float(table[i, j]) for i in range(table.shape[0]) for j in range(table.shape[1])}


class _PathEngine(_Engine):
    """
    path-dependent 模式

    第 n < m 层的锥侧面在 s_j = t_n + j(top − t_n)/K（j = 1..K）两侧各取一个点，
    值为 v_{n+1}(π ⊕ (s_j, ±r(s_j)); s_j, 0)，点间按 s 线性插值，s_1 之前取常数；
    s = T 时取冻结路径上的 ξ。
    """

    def __init__(self, problem, config, upper, pool):
        super().__init__(problem, config, upper, pool)
        self._base: Dict[tuple, float] = {}

    def _boundary(self, pi: Partition, spec: ConeSpec):
        T = self.problem.T
        K = self.config.boundary_samples
        t_n, top = spec.t0, spec.top_time
        nodes = [t_n + j * (top - t_n) / K for j in range(1, K + 1)]
        lateral = [s for s in nodes if s < T]
        plus = [self.value(pi.extend(s, [spec.radius_at(s)]), s, 0.0) for s in lateral]
        minus = [self.value(pi.extend(s, [-spec.radius_at(s)]), s, 0.0) for s in lateral]
        if spec.reaches_terminal:
            corner = spec.radius_at(T)
            edge = frozen_terminal(self.problem, pi, np.array([corner, -corner]))
            lateral = lateral + [T]
            plus.append(float(edge[0]))
            minus.append(float(edge[1]))
        lateral_times = np.array(lateral)
        plus, minus = np.array(plus), np.array(minus)

        def boundary(s, x):
            s = np.broadcast_to(np.asarray(s, dtype=float), (x.shape[0],))
            xv = x[:, 0]
            out = np.where(xv >= 0.0, np.interp(s, lateral_times, plus), np.interp(s, lateral_times, minus))
            terminal = s >= T
            if terminal.any():
                out[terminal] = frozen_terminal(self.problem, pi, xv[terminal])
            return out

        return boundary

    def field(self, pi: Partition) -> ValueField:
        level = len(pi)
        key = ("field", pi.key(self.config.quantum))

        def build():
            spec = self._cone(pi.last_time())
            boundary = self._boundary(pi, spec)
            return self._solve(spec.t0, float(pi.position[0]), boundary, level)

        return self._memo(key, build)

    def base_value(self, pi: Partition, t: float, x: float) -> float:
        q = self.config.quantum
        key = (pi.key(q), int(round(t / q)), int(round(x / q)))

        def build():
            self._charge(len(pi))
            estimate = _base_estimate(self.problem, self.config, pi, t, x, self.upper,
                                      _base_seed(self.config, pi, t, x), self.pool)
            with self._lock:
                self.max_stderr = max(self.max_stderr, estimate.stderr)
            return estimate.value

        return self._once(self._base, key, build)

    def base_values(self) -> Dict[tuple, float]:
        return dict(self._base)


# ----------------------------------------------------------------------
# 级联解
# ----------------------------------------------------------------------
class CascadeSolution:
    """
    θ̄^{ε,m} 与 θ̲^{ε,m} 两条级联的求值器

    value(π, t, x, variant) 在 D_{n+1} 上求 v_n；根值在构造时计算。
    """

    def __init__(self, problem: FrozenProblem, config: CascadeConfig, pool: Optional[WorkerPool] = None):
        self.problem = problem
        self.config = config
        self.pool = pool or serial_pool()
        engine_cls = _FeatureEngine if problem.problem_class == MODE_FEATURES else _PathEngine
        self.engines = {UPPER: engine_cls(problem, config, True, self.pool),
                        LOWER: engine_cls(problem, config, False, self.pool)}

    @property
    def mode(self) -> str:
        return self.problem.problem_class

    def empty_partition(self) -> Partition:
        return Partition(epsilon=self.config.epsilon, dim=1)

    def value(self, pi: Partition, t: float, x: float, variant: str = UPPER) -> float:
        check_point(self.problem, self.config.epsilon, pi, t, x)
        return self._engine(variant).value(pi, t, float(x))

    def grid_value(self, pi: Partition, s: float, x: float, variant: str = UPPER) -> float:
        return self._engine(variant).grid_value(pi, s, float(x))

    def _engine(self, variant: str) -> _Engine:
        engine = self.engines.get(variant)
        if engine is None:
            raise ConfigurationError(f"未知求值器: {variant}，可选 {UPPER}/{LOWER}")
        return engine

    def upper(self, pi: Partition, t: float, x: float) -> float:
        return self.value(pi, t, x, UPPER)

    def lower(self, pi: Partition, t: float, x: float) -> float:
        return self.value(pi, t, x, LOWER)

    @property
    def stderr(self) -> float:
        return max(engine.max_stderr for engine in self.engines.values())

    @property
    def tolerance(self) -> float:
        """排序检查的合并容差：3·stderr + 网格容差"""
        return 3.0 * self.stderr + self.config.grid_tolerance

    def root(self) -> dict:
        pi = self.empty_partition()
        upper = self.value(pi, 0.0, 0.0, UPPER)
        lower = self.value(pi, 0.0, 0.0, LOWER)
        return {"upper_root": upper, "lower_root": lower, "gap": upper - lower, "root": 0.5 * (upper + lower)}

    def level_stats(self) -> List[dict]:
        stats = []
        for level in range(self.config.m + 1):
            entry = {"level": level,
                     "solves_upper": self.engines[UPPER].level_counts.get(level, 0),
                     "solves_lower": self.engines[LOWER].level_counts.get(level, 0)}
            if self.mode == MODE_FEATURES and level >= 1:
                upper_engine, lower_engine = self.engines[UPPER], self.engines[LOWER]
                if level in upper_engine.tables and level in lower_engine.tables:
                    reach = np.abs(upper_engine.s_grid) <= level * self.config.epsilon + 1e-12
                    gap = (upper_engine.tables[level] - lower_engine.tables[level])[:-1, reach]
                    entry["table_gap_max"] = float(np.max(gap))
                    entry["table_gap_mean"] = float(np.mean(gap))
            stats.append(entry)
        return stats

    def report(self) -> dict:
        result = self.root()
        result.update({
            "problem": self.problem.name,
            "mode": self.mode,
            "epsilon": self.config.epsilon,
            "m": self.config.m,
            "stderr": self.stderr,
            "per_level_stats": self.level_stats(),
        })
        return result


class ShiftedSolution:
    """ũ(t, ω) = u(t, ω) − ρ·(T − t)，各层同样平移"""

    def __init__(self, solution, rho: float):
        if rho < 0:
            raise PreconditionError(f"ρ 必须非负: {rho}")
        self.base = solution
        self.rho = float(rho)
        self.problem = solution.problem
        self.config = solution.config
        self.pool = solution.pool

    @property
    def mode(self) -> str:
        return self.base.mode

    @property
    def tolerance(self) -> float:
        return self.base.tolerance

    def empty_partition(self) -> Partition:
        return self.base.empty_partition()

    def _shift(self, t: float) -> float:
        return self.rho * (self.problem.T - t)

    def value(self, pi: Partition, t: float, x: float, variant: str = UPPER) -> float:
        return self.base.value(pi, t, x, variant) - self._shift(t)

    def grid_value(self, pi: Partition, s: float, x: float, variant: str = UPPER) -> float:
        return self.base.grid_value(pi, s, x, variant) - self._shift(s)

    def root(self) -> dict:
        root = dict(self.base.root())
        for key in ("upper_root", "lower_root", "root"):
            root[key] -= self._shift(0.0)
        return root


def cascade_solve(problem: FrozenProblem, config: CascadeConfig, pool: Optional[WorkerPool] = None) -> CascadeSolution:
    """
    构造上下两条级联并计算根值

    第 m 层为底层表示，第 i < m 层在锥上求冻结 PDE，侧面数据取自第 i+1 层。
    """
    logger.info(f"级联求解开始: 问题={problem.name}, 模式={problem.problem_class}, ε={config.epsilon}, m={config.m}")
    solution = CascadeSolution(problem, config, pool)
    root = solution.root()
    logger.info(f"级联求解完成: upper={root['upper_root']:.6f}, lower={root['lower_root']:.6f}, "
                f"gap={root['gap']:.3e}")
    return solution


def modulus_shift(solution, rho_of_eps: float) -> ShiftedSolution:
    """u^ε − ρ(ε)(T − t)；ρ = 0 时与原解一致"""
    return ShiftedSolution(solution, rho_of_eps)


# ----------------------------------------------------------------------
# u^ε 的求值
# ----------------------------------------------------------------------
def partition_state(solution, t: float, omega: SampledPath) -> Tuple[Partition, float]:
    """ω 在 t 时刻的伪马氏状态：(π_n, ω_t − ω_{H_n})"""
    if omega.dim != 1:
        raise DomainError(f"级联只支持 d = 1，路径维度为 {omega.dim}")
    if not omega.covers(0.0, t):
        raise DomainError(f"路径定义域 [{omega.t_start}, {omega.t_end}] 未覆盖 [0, {t}]")
    if t > solution.problem.T:
        raise DomainError(f"t={t} 超过 T={solution.problem.T}")
    pi, x_bar = hitting_partition_state(omega, t, solution.config.epsilon, solution.problem.L1)
    return pi, float(x_bar[0])


def evaluate_u_eps(solution, t: float, omega: SampledPath, variant: str = UPPER) -> float:
    """u^ε(t, ω) = v_n(π_n; t, ω_t − ω_{H_n})，H_n ≤ t < H_{n+1}"""
    pi, x = partition_state(solution, t, omega)
    return solution.value(pi, t, x, variant)


# ----------------------------------------------------------------------
# 检查
# ----------------------------------------------------------------------
def random_path(rng: np.random.Generator, T: float, steps: int = 400) -> SampledPath:
    """[0, T] 上的随机游走折线（标准 Wiener 增量）"""
    grid = np.linspace(0.0, T, steps + 1)
    increments = rng.standard_normal(steps) * np.sqrt(np.diff(grid))
    values = np.concatenate([[0.0], np.cumsum(increments)])
    return SampledPath(times=grid, values=values[:, None], t_end=T)


def sample_partitions(solution, level: int, count: int, seed: int = 0, max_tries: int = 50) -> List[Partition]:
    """由随机路径的命中序列截取长度为 level 的划分"""
    rng = np.random.default_rng(seed)
    found = []
    for _ in range(max(1, count) * max_tries):
        if len(found) >= count:
            break
        if level == 0:
            found.append(solution.empty_partition())
            continue
        path = random_path(rng, solution.problem.T)
        pi = hitting_sequence(path, solution.config.epsilon, solution.problem.L1)
        if len(pi) >= level:
            found.append(pi.prefix(level))
    if len(found) < count:
        logger.warning(f"只采到 {len(found)}/{count} 个长度为 {level} 的划分")
    return found


def random_points(solution, count: int, seed: int = 0) -> List[Tuple[Partition, float, float]]:
    """随机求值点 (π_n, t, x)，由随机路径在随机时刻的状态给出"""
    rng = np.random.default_rng(seed)
    points = []
    for _ in range(count):
        path = random_path(rng, solution.problem.T)
        t = float(rng.uniform(0.0, solution.problem.T))
        pi, x = partition_state(solution, t, path)
        points.append((pi, t, x))
    return points


def compatibility_report(solution, level: int, n_points: int = 50, seed: int = 0, variant: str = UPPER,
                         tolerance: Optional[float] = None) -> dict:
    """
    侧面粘合检查：|v_n(π_n; s, x̄) − v_{n+1}(π_n ⊕ (s, x̄); s, 0)|

    左边取第 n 层的网格插值（不经边界数据），x̄ = ±r(s)。
    """
    config, problem = solution.config, solution.problem
    if not 0 <= level < config.m:
        raise PreconditionError(f"兼容性检查要求 0 <= n < m: n={level}, m={config.m}")
    tolerance = 5.0 * config.dx if tolerance is None else tolerance
    rng = np.random.default_rng(seed)
    partitions = sample_partitions(solution, level, max(1, n_points // 5), seed)
    errors = []
    for k in range(n_points):
        if not partitions:
            break
        pi = partitions[k % len(partitions)]
        spec = ConeSpec(pi.last_time(), config.epsilon, problem.L1, problem.T)
        s = float(rng.uniform(spec.t0, spec.top_time))
        if s >= problem.T:
            continue
        x_bar = float(rng.choice([-1.0, 1.0])) * spec.radius_at(s)
        lhs = solution.grid_value(pi, s, x_bar, variant)
        rhs = solution.value(pi.extend(s, [x_bar]), s, 0.0, variant)
        errors.append(abs(lhs - rhs))
    max_error = float(max(errors)) if errors else 0.0
    success = bool(errors) and max_error <= tolerance
    if not success:
        logger.warning(f"第 {level} 层兼容性检查未通过: 最大误差 {max_error:.3e} > {tolerance:.3e}")
    return {"success": success, "level": level, "points": len(errors), "max_error": max_error,
            "mean_error": float(np.mean(errors)) if errors else 0.0, "tolerance": tolerance}


def time_continuity_report(solution, omega: SampledPath, delta: Optional[float] = None, variant: str = UPPER,
                           tolerance: Optional[float] = None) -> dict:
    """沿固定路径在每个侧面命中时刻比较 u^ε(H_k − δ) 与 u^ε(H_k)"""
    config, problem = solution.config, solution.problem
    delta = 1e-3 * problem.T if delta is None else delta
    tolerance = 5.0 * config.dx if tolerance is None else tolerance
    pi = hitting_sequence(omega, config.epsilon, problem.L1, T=problem.T)
    jumps = []
    for point in pi.points:
        h = point.time
        before = evaluate_u_eps(solution, max(h - delta, 0.0), omega, variant)
        at = evaluate_u_eps(solution, h, omega, variant)
        jumps.append({"time": h, "before": before, "at": at, "jump": abs(at - before)})
    max_jump = max((j["jump"] for j in jumps), default=0.0)
    success = max_jump <= tolerance
    if not success:
        logger.warning(f"u^ε 在命中时刻的跳跃 {max_jump:.3e} 超过容差 {tolerance:.3e}")
    return {"success": success, "exits": jumps, "max_jump": max_jump, "tolerance": tolerance, "delta": delta}


def hitting_probability(problem: FrozenProblem, epsilon: float, level: int, n: int, seed: int,
                        step: Optional[float] = None, pool: Optional[WorkerPool] = None) -> float:
    """常数控制族上 sup_P P(H_level < T) 的估计"""
    spec = MeasureFamilySpec(L=problem.L, d=1, T=problem.T, t0=0.0, step=step or problem.T / 200.0)
    sampler = ControlledSampler(spec, n, seed, pool)

    def reached(grid, paths):
        seq = batch_hitting_sequence(grid, paths, epsilon, problem.L1)
        return (seq.counts >= level).astype(float)

    return max(sample_mean(sampler.samples(reached, law))[0] for law in constant_family(problem.L).constant_laws())


def propagation_bound(solution: CascadeSolution, n: int = 2000, seed: int = 0) -> dict:
    """根值间隙 ≤ e^{LT}·(底层间隙上界)·sup_P P(H_m < T) + 容差"""
    problem, config = solution.problem, solution.config
    upper_base = solution.engines[UPPER].base_values()
    lower_base = solution.engines[LOWER].base_values()
    common = set(upper_base) & set(lower_base)
    if not common:
        raise PreconditionError("底层尚未求值，先调用 cascade_solve")
    base_gap = max(upper_base[k] - lower_base[k] for k in common)
    p_m = hitting_probability(problem, config.epsilon, config.m, n, seed, pool=solution.pool)
    bound = math.exp(problem.L * problem.T) * max(base_gap, 0.0) * p_m
    gap = solution.root()["gap"]
    success = gap <= bound + solution.tolerance
    return {"success": success, "root_gap": gap, "base_gap": base_gap, "hit_probability": p_m,
            "bound": bound, "tolerance": solution.tolerance}


def fit_gap_rate(gaps: Mapping[int, float], epsilon: float) -> dict:
    """
    gap(m) ≲ c/(mε²) 的诊断拟合

    ĉ = max_m gap(m)·m·ε²；另给出 log gap 对 log m 的斜率。
    """
    if not gaps:
        raise PreconditionError("没有可拟合的间隙")
    ms = np.array(sorted(gaps), dtype=float)
    values = np.array([max(gaps[int(m)], 0.0) for m in ms])
    c_hat = float(np.max(values * ms * epsilon ** 2))
    fitted = c_hat / (ms * epsilon ** 2)
    slope = None
    positive = values > 0
    if positive.sum() >= 2:
        slope = float(np.polyfit(np.log(ms[positive]), np.log(values[positive]), 1)[0])
    return {"c_hat": c_hat, "m": ms.astype(int).tolist(), "gap": values.tolist(), "fitted": fitted.tolist(),
            "log_slope": slope}


def gap_sweep(problem: FrozenProblem, config: CascadeConfig, ms: Sequence[int],
              pool: Optional[WorkerPool] = None) -> dict:
    """
    不同截断层数下的根值与夹逼检查

    θ̲^m ≤ θ̲^{m+1} ≤ θ̄^{m+1} ≤ θ̄^m，每个不等式允许 3·stderr + 网格容差。
    """
    rows = []
    tolerance = 0.0
    for m in sorted(ms):
        solution = cascade_solve(problem, replace(config, m=m), pool)
        root = solution.root()
        tolerance = max(tolerance, solution.tolerance)
        rows.append({"m": m, **root, "stderr": solution.stderr})
    violations = []
    for prev, cur in zip(rows, rows[1:]):
        checks = [
            ("lower_monotone", prev["lower_root"] - cur["lower_root"]),
            ("sandwich", cur["lower_root"] - cur["upper_root"]),
            ("upper_monotone", cur["upper_root"] - prev["upper_root"]),
        ]
        for name, excess in checks:
            if excess > tolerance:
                violations.append({"check": name, "m": cur["m"], "excess": excess})
    if violations:
        logger.warning(f"夹逼检查发现 {len(violations)} 处越界")
    rate = fit_gap_rate({row["m"]: row["gap"] for row in rows}, config.epsilon)
    return {"success": not violations, "rows": rows, "violations": violations, "tolerance": tolerance,
            "rate": rate}


def verify_comparison(problem: FrozenProblem, xi_low: PathFunctional, xi_high: PathFunctional,
                      config: CascadeConfig, sample_points=None, n_points: int = 10,
                      pool: Optional[WorkerPool] = None) -> dict:
    """
    比较原理的可执行检查

    分别对 ξ_low 与 ξ_high 建级联，在样本点上检查上下两个求值器都保序，报告最差裕量。
    不抛出检查失败，只在报告中标记。
    """
    low = cascade_solve(problem.with_terminal(xi_low), config, pool)
    high = cascade_solve(problem.with_terminal(xi_high), config, pool)

    # 路径样本上的前提 ξ_low ≤ ξ_high
    rng = np.random.default_rng(config.seed)
    paths = [random_path(rng, problem.T, steps=100) for _ in range(64)]
    precondition_ok = all(xi_low.on_path(p) <= xi_high.on_path(p) + 1e-12 for p in paths)

    if sample_points is None:
        sample_points = [(low.empty_partition(), 0.0, 0.0)] + random_points(low, max(n_points - 1, 0), config.seed)
    tolerance = 3.0 * (low.stderr + high.stderr) + 1e-9
    margins = []
    for pi, t, x in sample_points:
        for variant in (UPPER, LOWER):
            margin = high.value(pi, t, x, variant) - low.value(pi, t, x, variant)
            margins.append({"t": t, "x": x, "level": len(pi), "variant": variant, "margin": margin})
    worst = min(m["margin"] for m in margins) if margins else 0.0
    violations = [m for m in margins if m["margin"] < -tolerance]
    low_root, high_root = low.root(), high.root()
    if violations:
        logger.warning(f"比较检查发现 {len(violations)} 处违反，最差裕量 {worst:.3e}")
    return {
        "success": precondition_ok and not violations,
        "precondition_ok": precondition_ok,
        "worst_margin": worst,
        "violations": violations,
        "points": len(sample_points),
        "tolerance": tolerance,
        "root_difference_upper": high_root["upper_root"] - low_root["upper_root"],
        "root_difference_lower": high_root["lower_root"] - low_root["lower_root"],
    }


def base_continuity_check(solution, n_points: int = 20, seed: int = 0,
                          deltas: Sequence[float] = (4e-2, 2e-2, 1e-2), variant: str = UPPER, growth: float = 2.0,
                          points: Optional[Sequence[Tuple[float, float]]] = None) -> dict:
    """
    底层表示在 (t, x) 上的连续性模

    比较 (t, x) 与 (t + δ², x + δ) 两处的底层值，ratio(δ) = |Δθ| / (2δ)。
    在最粗的 δ 上取 C = max ratio，较细的 δ 要求 ratio ≤ growth·C + 3·stderr/δ；
    跳跃使 ratio 按 1/δ 增长，从而越界。

    :param points: (t, x) 列表，缺省在第一个锥内随机取 n_points 个点
    """
    deltas = sorted({float(d) for d in deltas}, reverse=True)
    if len(deltas) < 2 or deltas[-1] <= 0:
        raise ConfigurationError(f"至少需要两个不同的正 δ: {deltas}")
    problem, config = solution.problem, solution.config
    engine = solution._engine(variant)
    pi = solution.empty_partition()
    if points is None:
        rng = np.random.default_rng(seed)
        life = config.epsilon / problem.L1
        coarse = deltas[0]
        points = []
        for _ in range(n_points):
            t = float(rng.uniform(0.0, 0.5 * life))
            r = config.epsilon - problem.L1 * (t + coarse ** 2)
            x = float(rng.uniform(-0.5 * r, max(0.5 * r - coarse, -0.5 * r)))
            points.append((t, x))
    rows = []
    for delta in deltas:
        ratios = [abs(engine.base_value(pi, t + delta ** 2, x + delta) - engine.base_value(pi, t, x)) / (2.0 * delta)
                  for t, x in points]
        rows.append({"delta": delta, "max_ratio": float(max(ratios)) if ratios else 0.0})
    # stderr 在求值之后读取
    stderr = solution.stderr
    C = rows[0]["max_ratio"]
    for row in rows:
        row["bound"] = growth * C + 3.0 * stderr / row["delta"]
        row["ok"] = bool(np.isfinite(row["max_ratio"])) and row["max_ratio"] <= row["bound"] + 1e-12
    success = all(row["ok"] for row in rows)
    if not success:
        worst = max(rows, key=lambda row: row["max_ratio"] - row["bound"])
        logger.warning(f"底层连续性检查未通过: δ={worst['delta']:g} 处比值 {worst['max_ratio']:.3e} "
                       f"> {worst['bound']:.3e}")
    return {"success": success, "C": C, "max_ratio": max(row["max_ratio"] for row in rows), "points": len(points),
            "rows": rows, "stderr": stderr, "growth": growth}
