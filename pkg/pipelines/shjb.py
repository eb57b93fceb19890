"""
随机系数 HJB 的值函数

受控解耦 FBSDE：
    dX = b(s, ω, X, α) ds + σ(s, ω, X, α) dB_s
    −dY = f(s, ω, X, Y, Z, α) ds − Z dB_s,  Y_T = g(ω, X_T)
直接值 u⁰ 在真实路径上模拟；级联值把系数中的路径替换为在逐次命中时刻冻结的分段常数路径。
控制取开环分段常数目录上的最大值。生成元关于 (y, z) 仿射时用 Girsanov 权重直接求期望，
否则用不依赖 z 的嵌套 Picard 迭代。
"""

import itertools
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.hitting import (
    OUTSIDE, ConeSpec, batch_hitting_sequence, cone_classify, frozen_values, partition_state,
)
from core.paths import Partition, SampledPath
from pipelines.problems import ProblemConfig
from pipelines.registry import (
    Coefficient, Driver, StateTerminal, make_drift, make_driver, make_terminal, make_volatility,
)
from solvers.bsde import affine_bsde_samples
from solvers.nonlinear_expectation import MCEstimate, chunk_normals, derive_seed, sample_mean
from utils.errors import ConfigurationError, ConvergenceError, DomainError, StencilError
from utils.logger import get_logger
from utils.parallel import WorkerPool, serial_pool

logger = get_logger(name="pipelines.shjb")

DOMAIN_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class SHJBProblem:
    """
    controls:   有限控制集 U ⊂ R
    intervals:  开环控制在 [t, T] 上的等分段数，目录大小 |U|^intervals
    L:          |∂_y f| 的声明界，用于有界性检查
    L1:         锥斜率
    """
    name: str
    T: float
    controls: Tuple[float, ...]
    drift: Coefficient
    volatility: Coefficient
    driver: Driver
    terminal: StateTerminal
    L: float = 1.0
    L1: Optional[float] = None
    intervals: int = 2

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError(f"T 必须为正: {self.T}")
        object.__setattr__(self, "controls", tuple(float(a) for a in self.controls))
        if not self.controls:
            raise ConfigurationError("控制集为空")
        if self.intervals < 1:
            raise ConfigurationError(f"控制段数必须 >= 1: {self.intervals}")
        if self.driver.y_lipschitz > self.L + 1e-12:
            raise ConfigurationError(f"生成元 {self.driver.name} 的 y-Lipschitz 常数 {self.driver.y_lipschitz} 超过 L={self.L}")
        if self.L1 is None:
            object.__setattr__(self, "L1", self.L + 1.0)

    def catalog(self) -> List[Tuple[float, ...]]:
        if len(self.controls) == 1:
            return [(self.controls[0],) * self.intervals]
        return list(itertools.product(self.controls, repeat=self.intervals))

    def with_controls(self, controls: Sequence[float]) -> "SHJBProblem":
        return replace(self, controls=tuple(controls))

    @classmethod
    def from_config(cls, config: ProblemConfig) -> "SHJBProblem":
        config.check_keys(["kind", "name", "description", "T", "controls", "intervals", "L", "L1",
                           "drift", "volatility", "driver", "terminal", "shjb"])
        parts = {}
        for key, factory in (("drift", make_drift), ("volatility", make_volatility),
                             ("driver", make_driver), ("terminal", make_terminal)):
            section = config.section(key)
            try:
                parts[key] = factory(section.get("type", required=True, kind=str), **section.params())
            except ConfigurationError as e:
                section.fail("type", str(e))
        controls = config.get("controls", required=True, kind=list)
        if not controls or any(isinstance(a, bool) or not isinstance(a, (int, float)) for a in controls):
            config.fail("controls", f"应为非空数值列表，实际为 {controls!r}")
        L = config.get("L", 1.0, kind=float, positive=True)
        try:
            return cls(
                name=config.get("name", config.source, kind=str),
                T=config.get("T", required=True, kind=float, positive=True),
                controls=tuple(controls),
                intervals=config.get("intervals", 2, kind=int, positive=True),
                L=L,
                L1=config.get("L1", L + 1.0, kind=float, positive=True),
                **parts,
            )
        except ConfigurationError as e:
            config.fail(None, str(e))


@dataclass(frozen=True)
class SHJBConfig:
    """
    epsilon:       级联锥半径
    samples:       蒙特卡洛样本数
    step:          Euler 步长，默认 T/200
    picard_depth:  一般生成元的 Picard 迭代深度（<= 3）
    picard_nodes:  Picard 积分的粗网格节点数
    inner_samples: 嵌套蒙特卡洛的内层样本数
    """
    epsilon: float = 0.2
    samples: int = 2000
    seed: int = 0
    step: Optional[float] = None
    picard_depth: int = 3
    picard_nodes: int = 4
    inner_samples: int = 8

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"ε 必须为正: {self.epsilon}")
        if self.samples < 2:
            raise ConfigurationError(f"蒙特卡洛样本数必须 >= 2: {self.samples}")
        if not 1 <= self.picard_depth <= 3:
            raise ConfigurationError(f"Picard 深度必须在 1..3: {self.picard_depth}")
        if self.picard_nodes < 1 or self.inner_samples < 1:
            raise ConfigurationError("Picard 节点数与内层样本数必须 >= 1")

    def n_steps(self, span: float, T: float) -> int:
        step = T / 200.0 if self.step is None else self.step
        return max(1, int(math.ceil(span / step - 1e-9)))

    @classmethod
    def from_config(cls, section: ProblemConfig, **overrides) -> "SHJBConfig":
        section.check_keys(["epsilon", "samples", "seed", "step", "picard_depth", "picard_nodes", "inner_samples"])
        values = {
            "epsilon": section.get("epsilon", 0.2, kind=float, positive=True),
            "samples": section.get("samples", 2000, kind=int, positive=True),
            "seed": section.get("seed", 0, kind=int, nonnegative=True),
            "step": section.get("step", None, kind=float, positive=True),
            "picard_depth": section.get("picard_depth", 3, kind=int, positive=True),
            "picard_nodes": section.get("picard_nodes", 4, kind=int, positive=True),
            "inner_samples": section.get("inner_samples", 8, kind=int, positive=True),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# ----------------------------------------------------------------------
# 模拟
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class _Control:
    """[t0, T] 上等分段的开环控制"""
    values: Tuple[float, ...]
    t0: float
    T: float

    def at(self, s: float) -> float:
        m = len(self.values)
        k = int((s - self.t0) / (self.T - self.t0) * m) if self.T > self.t0 else m - 1
        return self.values[min(max(k, 0), m - 1)]


@dataclass(frozen=True, eq=False)
class _Start:
    """
    一批起点

    prefix_grid/prefix_path: s 之前（不含 s）系数可见的路径
    current:  真实路径在 s 的值
    seen:     系数在 s 看到的值（冻结时为最后命中点的值）
    last_hit: 最后命中时刻，None 表示不冻结
    """
    s: float
    prefix_grid: np.ndarray
    prefix_path: np.ndarray
    current: np.ndarray
    seen: np.ndarray
    x: np.ndarray
    last_hit: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.current.shape[0])

    @property
    def frozen(self) -> bool:
        return self.last_hit is not None

    def repeat(self, k: int) -> "_Start":
        rep = (lambda a: None if a is None else np.repeat(a, k, axis=0))
        return _Start(self.s, self.prefix_grid, rep(self.prefix_path), rep(self.current), rep(self.seen),
                      rep(self.x), rep(self.last_hit))


@dataclass(frozen=True, eq=False)
class _Trajectory:
    grid: np.ndarray
    dW: np.ndarray
    true_path: np.ndarray
    seen_path: np.ndarray
    X: np.ndarray
    hit_times: Optional[np.ndarray]

    def full(self, start: _Start) -> Tuple[np.ndarray, np.ndarray]:
        times = np.concatenate([start.prefix_grid, self.grid])
        return times, np.concatenate([start.prefix_path, self.seen_path], axis=1)

    def start_at(self, start: _Start, index: int) -> _Start:
        """以第 index 个网格时刻为新起点（嵌套模拟用）"""
        r = float(self.grid[index])
        prefix_grid = np.concatenate([start.prefix_grid, self.grid[:index]])
        prefix_path = np.concatenate([start.prefix_path, self.seen_path[:, :index]], axis=1)
        last_hit = None
        if start.frozen:
            hits = np.where((self.hit_times > start.s) & (self.hit_times <= r), self.hit_times, -np.inf)
            latest = hits.max(axis=1)
            last_hit = np.where(np.isfinite(latest), latest, start.last_hit)
        return _Start(r, prefix_grid, prefix_path, self.true_path[:, index], self.seen_path[:, index],
                      self.X[:, index], last_hit)


def _simulate(problem: SHJBProblem, epsilon: float, start: _Start, control: _Control,
              normals: np.ndarray) -> _Trajectory:
    """Euler–Maruyama；冻结时系数看到的是最后命中点处的路径值"""
    n, K = normals.shape
    grid = np.linspace(start.s, problem.T, K + 1)
    h = np.diff(grid)
    dW = normals * np.sqrt(h)[None, :]
    W = np.concatenate([np.zeros((n, 1)), np.cumsum(dW, axis=1)], axis=1)
    true_path = start.current[:, None] + W
    hit_times = None
    if start.frozen:
        seq = batch_hitting_sequence(grid, W[:, :, None], epsilon, problem.L1,
                                     x0=(start.current - start.seen)[:, None],
                                     K0=epsilon + problem.L1 * start.last_hit)
        knot_values = start.current[:, None, None] + seq.knot_values
        knot_values[:, 0, 0] = start.seen
        seen_path = frozen_values(grid, seq.knot_times, knot_values)[:, :, 0]
        hit_times = seq.knot_times
    else:
        seen_path = true_path
    X = np.empty((n, K + 1))
    X[:, 0] = start.x
    for k in range(K):
        alpha = control.at(grid[k])
        b = problem.drift(grid[k], seen_path[:, k], X[:, k], alpha)
        sigma = problem.volatility(grid[k], seen_path[:, k], X[:, k], alpha)
        X[:, k + 1] = X[:, k] + b * h[k] + sigma * dW[:, k]
    return _Trajectory(grid, dW, true_path, seen_path, X, hit_times)


def _affine_samples(problem: SHJBProblem, epsilon: float, start: _Start, control: _Control,
                    normals: np.ndarray) -> np.ndarray:
    traj = _simulate(problem, epsilon, start, control, normals)
    K = normals.shape[1]
    a = np.empty((start.size, K))
    beta = np.empty((start.size, K))
    f0 = np.empty((start.size, K))
    for k in range(K):
        s = traj.grid[k]
        a[:, k], beta[:, k], f0[:, k] = problem.driver.affine(s, traj.seen_path[:, k], traj.X[:, k], control.at(s))
    times, path = traj.full(start)
    g = problem.terminal(times, path, traj.X[:, -1])
    return affine_bsde_samples(np.diff(traj.grid), g, a, f0, beta[:, :, None], traj.dW[:, :, None])


def _picard_samples(problem: SHJBProblem, config: SHJBConfig, start: _Start, control: _Control, depth: int,
                    normals: np.ndarray, seed: int) -> np.ndarray:
    """
    第 depth 次 Picard 迭代 Y^{(depth)} 的逐样本值，Y^{(0)} ≡ 0

    Y^{(k)}_s = E[g + Σ_j f(r_j, ·, Y^{(k−1)}_{r_j}) Δr_j]，粗网格节点上的 Y^{(k−1)} 由嵌套模拟估计。
    """
    traj = _simulate(problem, config.epsilon, start, control, normals)
    K = normals.shape[1]
    J = min(config.picard_nodes, K)
    nodes = sorted({int(round(j * K / J)) for j in range(J)})
    bounds = nodes + [K]
    times, path = traj.full(start)
    total = problem.terminal(times, path, traj.X[:, -1]).astype(float).copy()
    for j, index in enumerate(nodes):
        r = float(traj.grid[index])
        dr = float(traj.grid[bounds[j + 1]] - r)
        if depth > 1:
            nested = traj.start_at(start, index)
            y_prev = _picard_value(problem, config, nested, control, depth - 1, derive_seed(seed, depth, j))
        else:
            y_prev = np.zeros(start.size)
        total += problem.driver.general(r, traj.seen_path[:, index], traj.X[:, index], y_prev, control.at(r)) * dr
    return total


def _picard_steps(config: SHJBConfig, s: float, T: float) -> int:
    """Euler 步数跟随 config.step，并取 picard_nodes 的整数倍，使粗节点落在网格上"""
    J = config.picard_nodes
    return J * int(math.ceil(config.n_steps(T - s, T) / J))


def _picard_value(problem: SHJBProblem, config: SHJBConfig, start: _Start, control: _Control, depth: int,
                  seed: int) -> np.ndarray:
    """每个起点上 Y^{(depth)} 的内层均值，返回 (B,)"""
    inner = config.inner_samples
    replicated = start.repeat(inner)
    K = _picard_steps(config, start.s, problem.T)
    normals = chunk_normals(seed, 0, replicated.size, K, 1)[:, :, 0]
    samples = _picard_samples(problem, config, replicated, control, depth, normals, seed)
    return samples.reshape(start.size, inner).mean(axis=1)


def _estimate(problem: SHJBProblem, config: SHJBConfig, start: _Start, pool: Optional[WorkerPool]) -> MCEstimate:
    """开环目录上逐控制估计 Y_t，取最大值；所有控制共享随机数"""
    pool = pool or serial_pool()
    n = config.samples
    T = problem.T
    if start.s >= T:
        times = np.append(start.prefix_grid, T)
        path = np.concatenate([start.prefix_path, start.seen[:, None]], axis=1)
        value = float(problem.terminal(times, path, start.x)[0])
        return MCEstimate(value=value, stderr=0.0, n_samples=n, argmax="terminal")

    best = None
    for values in problem.catalog():
        control = _Control(values, start.s, T)
        if problem.driver.is_affine:
            K = config.n_steps(T - start.s, T)

            def run(chunk, control=control, K=K):
                index, lo, hi = chunk
                normals = chunk_normals(config.seed, index, hi - lo, K, 1)[:, :, 0]
                return _affine_samples(problem, config.epsilon, start.repeat(hi - lo), control, normals)

            samples = np.concatenate(pool.map_ordered(run, pool.chunks(n)))
            mean, stderr = sample_mean(samples)
        else:
            mean, stderr = _picard_root(problem, config, start, control, pool)
        if best is None or mean > best[0]:
            best = (mean, stderr, ",".join(f"{a:g}" for a in values))
    return MCEstimate(value=best[0], stderr=best[1], n_samples=n, argmax=best[2])


def _picard_root(problem: SHJBProblem, config: SHJBConfig, start: _Start, control: _Control,
                 pool: WorkerPool) -> Tuple[float, float]:
    """根点上逐深度迭代；后一次迭代差距增大时视为不收敛。样本按块分发，块内随机数只依赖块序号"""
    K = _picard_steps(config, start.s, problem.T)
    chunks = pool.chunks(config.samples)
    estimates = []
    for depth in range(1, config.picard_depth + 1):
        def run(chunk, depth=depth):
            index, lo, hi = chunk
            normals = chunk_normals(config.seed, index, hi - lo, K, 1)[:, :, 0]
            return _picard_samples(problem, config, start.repeat(hi - lo), control, depth, normals,
                                   derive_seed(config.seed, "picard", index))

        estimates.append(sample_mean(np.concatenate(pool.map_ordered(run, chunks))))
    gaps = [abs(b[0] - a[0]) for a, b in zip(estimates, estimates[1:])]
    tol = 3.0 * estimates[-1][1]
    for prev, cur in zip(gaps, gaps[1:]):
        if cur > prev + tol:
            raise ConvergenceError(f"Picard 迭代不收敛: 相邻迭代差 {gaps}")
    logger.debug(f"Picard 迭代: {[round(e[0], 6) for e in estimates]}")
    return estimates[-1]


# ----------------------------------------------------------------------
# 值函数
# ----------------------------------------------------------------------
def simulate_value_direct(problem: SHJBProblem, t: float, omega: SampledPath, x: float, config: SHJBConfig,
                          pool: Optional[WorkerPool] = None) -> MCEstimate:
    """
    直接值 u⁰(t, ω, x)：系数看到真实路径

    :param omega: 至少覆盖 [0, t] 的一维路径，t 之后由模拟的布朗增量延续
    """
    if omega.dim != 1:
        raise DomainError(f"只支持一维路径: dim={omega.dim}")
    if not omega.covers(omega.t_start, t) or t > problem.T:
        raise DomainError(f"路径 [{omega.t_start}, {omega.t_end}] 未覆盖 t={t} 或 t > T={problem.T}")
    mask = omega.times < t
    current = float(omega.value_at(t)[0])
    start = _Start(s=float(t), prefix_grid=omega.times[mask], prefix_path=omega.values[mask, 0][None, :],
                   current=np.array([current]), seen=np.array([current]), x=np.array([float(x)]))
    return _estimate(problem, config, start, pool)


def shjb_cascade_value(problem: SHJBProblem, pi: Partition, t: float, x_bar: float, x: float, config: SHJBConfig,
                       pool: Optional[WorkerPool] = None) -> MCEstimate:
    """
    级联值 θ_n^ε(π_n; t, x̄, x)：系数看到逐次命中时刻冻结的路径

    (π_n, t, x̄) 必须在以最后划分点为顶点的锥内。
    """
    t_n = pi.last_time()
    if t < t_n or t > problem.T:
        raise DomainError(f"t={t} 不在 [{t_n}, {problem.T}] 内")
    if t < problem.T:
        spec = ConeSpec(t_n, config.epsilon, problem.L1, problem.T)
        if cone_classify(spec, t, [x_bar], tolerance=DOMAIN_TOLERANCE) == OUTSIDE:
            raise DomainError(f"(t={t}, x̄={x_bar}) 在以 t_n={t_n} 为顶点的锥外")
    times = np.concatenate([[0.0], pi.times])
    values = np.concatenate([[0.0], np.cumsum(pi.increments[:, 0])]) if len(pi) else np.zeros(1)
    mask = times < t
    S = float(pi.position[0])
    start = _Start(s=float(t), prefix_grid=times[mask], prefix_path=values[mask][None, :],
                   current=np.array([S + float(x_bar)]), seen=np.array([S]), x=np.array([float(x)]),
                   last_hit=np.array([t_n]))
    return _estimate(problem, config, start, pool)


def cascade_state(omega: SampledPath, t: float, epsilon: float, L1: float) -> Tuple[Partition, float]:
    """路径在 t 时刻的 (π_n, x̄)"""
    pi, x_bar = partition_state(omega, t, epsilon, L1)
    return pi, float(x_bar[0])


def compare_values(problem: SHJBProblem, t: float, omega: SampledPath, x: float, config: SHJBConfig,
                   pool: Optional[WorkerPool] = None) -> dict:
    """同一状态上的直接值与级联值"""
    direct = simulate_value_direct(problem, t, omega, x, config, pool)
    pi, x_bar = cascade_state(omega, t, config.epsilon, problem.L1)
    cascade = shjb_cascade_value(problem, pi, t, x_bar, x, config, pool)
    return {"direct": direct.value, "direct_stderr": direct.stderr, "cascade": cascade.value,
            "cascade_stderr": cascade.stderr, "gap": abs(cascade.value - direct.value), "epsilon": config.epsilon,
            "levels": len(pi), "argmax": direct.argmax}


def epsilon_sweep(problem: SHJBProblem, t: float, omega: SampledPath, x: float, config: SHJBConfig,
                  epsilons: Sequence[float] = (0.4, 0.2, 0.1), pool: Optional[WorkerPool] = None) -> dict:
    """级联值与直接值之差随 ε 的变化"""
    rows = [compare_values(problem, t, omega, x, replace(config, epsilon=eps), pool)
            for eps in sorted(epsilons, reverse=True)]
    gaps = [row["gap"] for row in rows]
    decreasing = all(b <= a for a, b in zip(gaps, gaps[1:]))
    if not decreasing:
        logger.warning(f"级联与直接值之差未随 ε 单调减小: {gaps}")
    return {"success": decreasing, "rows": rows}


# ----------------------------------------------------------------------
# 诊断
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class LocalSlice:
    """
    (t, x̄, x) 上 3×3×3 的局部网格值

    anchor: 冻结路径的基点 S，系数看到的当前值为 S + x̄
    """
    t_axis: np.ndarray
    xbar_axis: np.ndarray
    x_axis: np.ndarray
    values: np.ndarray
    anchor: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (3, 3, 3):
            raise StencilError(f"局部网格形状应为 (3, 3, 3)，实际为 {values.shape}")
        for label in ("t_axis", "xbar_axis", "x_axis"):
            axis = np.asarray(getattr(self, label), dtype=float)
            if axis.shape != (3,):
                raise StencilError(f"{label} 需要 3 个节点，实际为 {axis.shape}")
            steps = np.diff(axis)
            if np.any(steps <= 0) or abs(steps[1] - steps[0]) > 1e-9 * max(1.0, abs(steps[0])):
                raise StencilError(f"{label} 必须严格递增且等距: {axis.tolist()}")
            object.__setattr__(self, label, axis)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, fn, t: float, x_bar: float, x: float, dt: float, dx: float,
                      anchor: float = 0.0) -> "LocalSlice":
        """在以 (t, x̄, x) 为中心的网格上采样 fn(t, x̄, x)"""
        t_axis = t + dt * np.arange(-1, 2)
        xbar_axis = x_bar + dx * np.arange(-1, 2)
        x_axis = x + dx * np.arange(-1, 2)
        tt, bb, xx = np.meshgrid(t_axis, xbar_axis, x_axis, indexing="ij")
        return cls(t_axis, xbar_axis, x_axis, np.asarray(fn(tt, bb, xx), dtype=float), anchor)


def shjb_ppde_residual(problem: SHJBProblem, value_field_slice: LocalSlice) -> float:
    """
    提升 PDE 在局部网格中心的离散残差

    ∂_t u + ½∂²_{x̄x̄}u + sup_α [b ∂_x u + ½σ² ∂_xx u + σ ∂_{x x̄}u + f(t, S+x̄, x, u, z, α)]，
    z = ∂_x̄ u + σ ∂_x u。
    """
    sl = value_field_slice
    u = sl.values
    dt = sl.t_axis[1] - sl.t_axis[0]
    db = sl.xbar_axis[1] - sl.xbar_axis[0]
    dx = sl.x_axis[1] - sl.x_axis[0]
    c = u[1, 1, 1]
    u_t = (u[2, 1, 1] - u[0, 1, 1]) / (2.0 * dt)
    u_b = (u[1, 2, 1] - u[1, 0, 1]) / (2.0 * db)
    u_bb = (u[1, 2, 1] - 2.0 * c + u[1, 0, 1]) / db ** 2
    u_x = (u[1, 1, 2] - u[1, 1, 0]) / (2.0 * dx)
    u_xx = (u[1, 1, 2] - 2.0 * c + u[1, 1, 0]) / dx ** 2
    u_xb = (u[1, 2, 2] - u[1, 2, 0] - u[1, 0, 2] + u[1, 0, 0]) / (4.0 * db * dx)

    s = float(sl.t_axis[1])
    current = np.array([sl.anchor + sl.xbar_axis[1]])
    x = np.array([sl.x_axis[1]])
    y = np.array([c])
    best = -np.inf
    for alpha in problem.controls:
        b = float(problem.drift(s, current, x, alpha)[0])
        sigma = float(problem.volatility(s, current, x, alpha)[0])
        z = u_b + sigma * u_x
        if problem.driver.is_affine:
            a, beta, f0 = (float(v[0]) for v in problem.driver.affine(s, current, x, alpha))
            f = a * c + beta * z + f0
        else:
            f = float(problem.driver.general(s, current, x, y, alpha)[0])
        best = max(best, b * u_x + 0.5 * sigma ** 2 * u_xx + sigma * u_xb + f)
    return float(u_t + 0.5 * u_bb + best)


def control_enrichment_check(problem: SHJBProblem, extra_controls: Sequence[float], t: float, omega: SampledPath,
                             x: float, config: SHJBConfig, pool: Optional[WorkerPool] = None) -> dict:
    """扩大控制集后（相同随机数）值不减"""
    base = simulate_value_direct(problem, t, omega, x, config, pool)
    enriched_problem = problem.with_controls(tuple(problem.controls) + tuple(
        a for a in extra_controls if a not in problem.controls))
    enriched = simulate_value_direct(enriched_problem, t, omega, x, config, pool)
    return {"success": enriched.value >= base.value, "base": base.value, "enriched": enriched.value,
            "controls": list(enriched_problem.controls)}


def boundedness_check(problem: SHJBProblem, values: Sequence[float], t: float = 0.0) -> dict:
    """|value| ≤ e^{L(T−t)}(‖g‖ + (T−t)‖f(·,0,0,·)‖)；终端或源项无界时不检查"""
    span = problem.T - t
    bound = math.exp(problem.L * span) * (problem.terminal.bound + span * problem.driver.source_bound)
    if not math.isfinite(bound):
        return {"success": True, "bound": None, "checked": False}
    worst = max((abs(v) for v in values), default=0.0)
    return {"success": worst <= bound + 1e-12, "bound": bound, "worst": worst, "checked": True}
