"""
非线性期望的蒙特卡洛估计

P_L 测度族用有限控制族近似：漂移 |b| ≤ L（欧氏范数），扩散 0 ≤ σ ≤ √(2L)·I（特征值界）。
Ē^L[ξ] 取控制族上蒙特卡洛均值的最大值，E̲^L[ξ] = −Ē^L[−ξ]。

随机数约定：
1. 样本按固定块大小切分，第 k 块使用 default_rng([seed, k])
2. 同一块的标准正态增量在所有控制之间共享（公共随机数）
3. 归约按块顺序拼接后求均值，结果与 worker 数无关
"""

import itertools
import zlib
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.paths import SampledPath
from utils.errors import BoundError, ConfigurationError, PreconditionError
from utils.logger import get_logger
from utils.parallel import WorkerPool, serial_pool

logger = get_logger(name="solvers.nonlinear_expectation")

# (times (K+1,), values (n, K+1, d)) -> (n,)
BatchFunctional = Callable[[np.ndarray, np.ndarray], np.ndarray]

EXHAUSTIVE_LIMIT = 10_000
BOUND_TOL = 1e-12


@dataclass(frozen=True)
class MeasureFamilySpec:
    """
    P_L 的离散参数

    L:       漂移/扩散界
    d:       维度
    t0, T:   时间区间 [t0, T]
    step:    Euler 步长，默认 1e-3·(T − t0)
    """
    L: float
    d: int = 1
    T: float = 1.0
    t0: float = 0.0
    step: Optional[float] = None

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigurationError(f"L 必须为正: {self.L}")
        if self.d < 1:
            raise ConfigurationError(f"维度必须 >= 1: {self.d}")
        if not self.T > self.t0:
            raise ConfigurationError(f"需要 T > t0: t0={self.t0}, T={self.T}")
        step = 1e-3 * (self.T - self.t0) if self.step is None else float(self.step)
        if not step > 0:
            raise ConfigurationError(f"步长必须为正: {step}")
        object.__setattr__(self, "step", step)

    @property
    def n_steps(self) -> int:
        return max(1, int(math.ceil((self.T - self.t0) / self.step - 1e-9)))

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)

    @property
    def includes_wiener(self) -> bool:
        return 2.0 * self.L >= 1.0

    def restricted(self, t0: float) -> "MeasureFamilySpec":
        """同一步长下限制到 [t0, T]"""
        return MeasureFamilySpec(L=self.L, d=self.d, T=self.T, t0=t0, step=self.step)


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """
    分段常数控制（可带径向 bang-bang 反馈）

    drift:          (m, d) 每个时间段上的漂移
    sigma:          (m, d, d) 每个时间段上的对称扩散矩阵
    feedback_gain:  反馈漂移 b = gain · X/|X|，|gain| ≤ L；0 表示无反馈
    """
    name: str
    drift: np.ndarray
    sigma: np.ndarray
    feedback_gain: float = 0.0

    def __post_init__(self):
        drift = np.atleast_2d(np.asarray(self.drift, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        d = drift.shape[1]
        if sigma.ndim == 1:
            sigma = sigma[:, None, None] * np.eye(d)[None, :, :]
        elif sigma.ndim == 2:
            sigma = sigma[None, :, :]
        if sigma.shape[0] != drift.shape[0]:
            raise ConfigurationError(f"控制段数不一致: drift={drift.shape[0]}, sigma={sigma.shape[0]}")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_intervals(self) -> int:
        return int(self.drift.shape[0])

    @property
    def dim(self) -> int:
        return int(self.drift.shape[1])

    def check_bounds(self, L: float):
        """|b| ≤ L，0 ≤ σ ≤ √(2L)·I"""
        drift_norm = np.linalg.norm(self.drift, axis=1)
        worst = float(np.max(drift_norm + abs(self.feedback_gain))) if self.feedback_gain else float(np.max(drift_norm))
        if worst > L + BOUND_TOL:
            raise BoundError(f"控制 {self.name} 漂移 {worst} 超过界 L={L}")
        sym = 0.5 * (self.sigma + np.swapaxes(self.sigma, 1, 2))
        if not np.allclose(sym, self.sigma, atol=BOUND_TOL):
            raise BoundError(f"控制 {self.name} 的扩散矩阵不对称")
        lam = np.linalg.eigvalsh(sym)
        if lam.min() < -BOUND_TOL or lam.max() > math.sqrt(2.0 * L) + BOUND_TOL:
            raise BoundError(f"控制 {self.name} 扩散特征值 [{lam.min()}, {lam.max()}] 超出 [0, √(2L)]")

    def interval_index(self, times: np.ndarray, t0: float, T: float) -> np.ndarray:
        """网格时刻所在的控制段序号"""
        frac = (times - t0) / (T - t0)
        return np.clip((frac * self.n_intervals).astype(int), 0, self.n_intervals - 1)


@dataclass(frozen=True)
class MCEstimate:
    value: float
    stderr: float
    n_samples: int
    argmax: Optional[str] = None

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigurationError(f"蒙特卡洛样本数必须 >= 2: {self.n_samples}")
        if self.stderr < 0:
            raise ConfigurationError(f"标准误必须非负: {self.stderr}")

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "n_samples": self.n_samples,
                "argmax_control": self.argmax}


def sample_mean(values: np.ndarray) -> Tuple[float, float]:
    """
    均值与标准误

    以首样本为基准求均值，常数泛函可精确保持。
    """
    values = np.asarray(values, dtype=float)
    base = values[0]
    mean = float(base + np.mean(values - base))
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.shape[0])) if values.shape[0] > 1 else 0.0
    return mean, stderr


def column_means(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """按列求均值与标准误，(n, k) -> (k,), (k,)"""
    values = np.asarray(values, dtype=float)
    base = values[0]
    means = base + np.mean(values - base[None, :], axis=0)
    stderr = np.std(values, axis=0, ddof=1) / math.sqrt(values.shape[0])
    return means, stderr


def derive_seed(seed: int, *keys) -> int:
    """由主种子与若干键派生子种子（键可为整数或字符串，负数按 2^64 取模）"""
    entropy = [int(seed) % (1 << 64)]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) % (1 << 64))
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


# ----------------------------------------------------------------------
# 控制族
# ----------------------------------------------------------------------
def drift_catalog(L: float, d: int) -> List[np.ndarray]:
    """{0} ∪ {±L·e_i}，d = 1 时即 {−L, 0, L}"""
    catalog = [np.zeros(d)]
    for i in range(d):
        for sign in (-1.0, 1.0):
            b = np.zeros(d)
            b[i] = sign * L
            catalog.append(b)
    return catalog


def sigma_catalog(L: float, d: int, include_zero: bool = True) -> List[np.ndarray]:
    """{0, √L·I, √(2L)·I}"""
    levels = [0.0, math.sqrt(L), math.sqrt(2.0 * L)] if include_zero else [math.sqrt(L), math.sqrt(2.0 * L)]
    return [level * np.eye(d) for level in levels]


@dataclass(frozen=True, eq=False)
class ControlFamily:
    """
    分段常数控制族：每段独立地从 (漂移, 扩散) 目录中选取，另附径向反馈控制

    规模 = |目录|^段数 + 反馈数；不超过 EXHAUSTIVE_LIMIT 时穷举，否则坐标上升。
    """
    L: float
    d: int = 1
    intervals: int = 8
    drifts: Tuple[np.ndarray, ...] = ()
    sigmas: Tuple[np.ndarray, ...] = ()
    feedback: bool = True

    def __post_init__(self):
        if not self.drifts:
            object.__setattr__(self, "drifts", tuple(drift_catalog(self.L, self.d)))
        if not self.sigmas:
            object.__setattr__(self, "sigmas", tuple(sigma_catalog(self.L, self.d)))
        if self.intervals < 1:
            raise ConfigurationError(f"控制段数必须 >= 1: {self.intervals}")

    @property
    def catalog(self) -> List[Tuple[int, int]]:
        return list(itertools.product(range(len(self.drifts)), range(len(self.sigmas))))

    @property
    def size(self) -> int:
        return len(self.catalog) ** self.intervals + len(self.feedback_laws())

    def law(self, choice: Sequence[int]) -> ControlLaw:
        """choice[k] 为第 k 段在目录中的序号"""
        catalog = self.catalog
        pairs = [catalog[c] for c in choice]
        drift = np.array([self.drifts[i] for i, _ in pairs])
        sigma = np.array([self.sigmas[j] for _, j in pairs])
        name = "pc[" + ",".join(f"b{i}s{j}" for i, j in pairs) + "]"
        return ControlLaw(name=name, drift=drift, sigma=sigma)

    def constant_choices(self) -> List[Tuple[int, ...]]:
        return [(c,) * self.intervals for c in range(len(self.catalog))]

    def feedback_laws(self) -> List[ControlLaw]:
        if not self.feedback:
            return []
        laws = []
        for sign, label in ((1.0, "out"), (-1.0, "in")):
            for j, sigma in enumerate(self.sigmas):
                laws.append(ControlLaw(name=f"fb-{label}-s{j}", drift=np.zeros((1, self.d)),
                                       sigma=sigma[None, :, :], feedback_gain=sign * self.L))
        return laws

    def enumerate(self) -> List[ControlLaw]:
        laws = [self.law(choice) for choice in itertools.product(range(len(self.catalog)), repeat=self.intervals)]
        return laws + self.feedback_laws()

    def constant_laws(self) -> List[ControlLaw]:
        return [self.law(choice) for choice in self.constant_choices()] + self.feedback_laws()


def constant_family(L: float, d: int = 1, feedback: bool = True, include_zero_sigma: bool = True) -> ControlFamily:
    """单段（常数）控制族"""
    return ControlFamily(L=L, d=d, intervals=1, sigmas=tuple(sigma_catalog(L, d, include_zero_sigma)),
                         feedback=feedback)


def default_family(L: float, d: int = 1) -> ControlFamily:
    return ControlFamily(L=L, d=d, intervals=8)


FAMILY_KINDS = ("constant", "default")


def family_by_name(kind: str, L: float, d: int = 1) -> ControlFamily:
    if kind == "constant":
        return constant_family(L, d)
    if kind == "default":
        return default_family(L, d)
    raise ConfigurationError(f"未知控制族: {kind}，可选 {FAMILY_KINDS}")


def wiener_law(d: int = 1) -> ControlLaw:
    return ControlLaw(name="wiener", drift=np.zeros((1, d)), sigma=np.eye(d)[None, :, :])


# ----------------------------------------------------------------------
# 模拟
# ----------------------------------------------------------------------
def chunk_normals(seed: int, chunk_index: int, size: int, n_steps: int, d: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(chunk_index)])
    return rng.standard_normal((size, n_steps, d))


def euler_paths(law: ControlLaw, grid: np.ndarray, normals: np.ndarray, x0: Optional[np.ndarray] = None,
                t_control: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """
    Euler–Maruyama：X_{k+1} = X_k + b·h + σ·√h·Z_k

    :param grid: (K+1,) 时间网格
    :param normals: (n, K, d) 标准正态
    :param x0: 起点，默认原点
    :param t_control: 控制段划分所用的区间，默认为网格区间
    :return: (n, K+1, d)
    """
    n, K, d = normals.shape
    h = np.diff(grid)
    t0, T = (grid[0], grid[-1]) if t_control is None else t_control
    idx = law.interval_index(grid[:-1], t0, T)
    values = np.empty((n, K + 1, d))
    values[:, 0, :] = 0.0 if x0 is None else x0
    sqrt_h = np.sqrt(h)
    for k in range(K):
        b = law.drift[idx[k]]
        sigma = law.sigma[idx[k]]
        x = values[:, k, :]
        step = b[None, :] * h[k] + sqrt_h[k] * normals[:, k, :] @ sigma.T
        if law.feedback_gain:
            norm = np.linalg.norm(x, axis=1, keepdims=True)
            direction = np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)
            step = step + law.feedback_gain * direction * h[k]
        values[:, k + 1, :] = x + step
    return values


def simulate_controlled(law: ControlLaw, spec: MeasureFamilySpec, seed: int, n: int,
                        chunk_size: int = 2048) -> List[SampledPath]:
    """
    在 [t0, T] 上模拟 n 条受控路径，锚定在原点

    第 i 条样本只由 (seed, i // chunk_size) 与块内位置决定。
    """
    if n < 1:
        raise ConfigurationError(f"样本数必须 >= 1: {n}")
    law.check_bounds(spec.L)
    if law.dim != spec.d:
        raise ConfigurationError(f"控制维度 {law.dim} 与 d={spec.d} 不符")
    grid = spec.grid
    paths = []
    for index, start in enumerate(range(0, n, chunk_size)):
        size = min(chunk_size, n - start)
        normals = chunk_normals(seed, index, size, grid.shape[0] - 1, spec.d)
        values = euler_paths(law, grid, normals)
        paths.extend(SampledPath(times=grid, values=v, t_end=spec.T) for v in values)
    return paths


class ControlledSampler:
    """
    公共随机数下对多个控制求泛函样本

    同一 (seed, 块序号) 的正态增量对所有控制共享，块由 pool 并行计算并按序归约。
    """

    def __init__(self, spec: MeasureFamilySpec, n: int, seed: int, pool: Optional[WorkerPool] = None,
                 x0: Optional[np.ndarray] = None):
        if n < 2:
            raise ConfigurationError(f"蒙特卡洛样本数必须 >= 2: {n}")
        self.spec = spec
        self.n = n
        self.seed = seed
        self.pool = pool or serial_pool()
        self.grid = spec.grid
        self.x0 = x0

    def samples(self, functional: BatchFunctional, law: ControlLaw) -> np.ndarray:
        law.check_bounds(self.spec.L)
        if law.dim != self.spec.d:
            raise ConfigurationError(f"控制维度 {law.dim} 与 d={self.spec.d} 不符")

        def run(chunk):
            index, start, end = chunk
            normals = chunk_normals(self.seed, index, end - start, self.grid.shape[0] - 1, self.spec.d)
            values = euler_paths(law, self.grid, normals, self.x0)
            return np.asarray(functional(self.grid, values), dtype=float)

        return np.concatenate(self.pool.map_ordered(run, self.pool.chunks(self.n)))

    def estimate(self, functional: BatchFunctional, law: ControlLaw) -> Tuple[float, float]:
        return sample_mean(self.samples(functional, law))


def _optimize(sampler: ControlledSampler, functional: BatchFunctional, family, sign: float,
              restarts: int, max_sweeps: int) -> MCEstimate:
    """sign=+1 求最大，sign=-1 求最小（均以 sign·均值最大化）"""
    cache = {}

    def score(law: ControlLaw):
        if law.name not in cache:
            cache[law.name] = sampler.estimate(functional, law)
        mean, _ = cache[law.name]
        return sign * mean

    if isinstance(family, ControlFamily) and family.size > EXHAUSTIVE_LIMIT:
        # 坐标上升：从最优的若干常数控制出发，逐段替换目录项
        starts = sorted(family.constant_choices(), key=lambda c: -score(family.law(c)))[:max(1, restarts)]
        best_law = max((family.law(c) for c in starts), key=score)
        for choice in starts:
            choice = list(choice)
            current = score(family.law(choice))
            for _ in range(max_sweeps):
                improved = False
                for k in range(family.intervals):
                    for option in range(len(family.catalog)):
                        if option == choice[k]:
                            continue
                        trial = choice.copy()
                        trial[k] = option
                        value = score(family.law(trial))
                        if value > current:
                            choice, current, improved = trial, value, True
                if not improved:
                    break
            candidate = family.law(choice)
            if score(candidate) > score(best_law):
                best_law = candidate
        for law in family.feedback_laws():
            if score(law) > score(best_law):
                best_law = law
        laws_tried = len(cache)
    else:
        laws = family.enumerate() if isinstance(family, ControlFamily) else list(family)
        if not laws:
            raise ConfigurationError("控制族为空")
        best_law = laws[0]
        for law in laws:
            if score(law) > score(best_law):
                best_law = law
        laws_tried = len(laws)
    mean, stderr = cache[best_law.name]
    logger.debug(f"控制族优化完成: 尝试 {laws_tried} 个控制, 最优 {best_law.name}, 值 {mean}")
    return MCEstimate(value=mean, stderr=stderr, n_samples=sampler.n, argmax=best_law.name)


def upper_expectation(functional: BatchFunctional, spec: MeasureFamilySpec, family, n: int, seed: int,
                      pool: Optional[WorkerPool] = None, restarts: int = 3, max_sweeps: int = 3) -> MCEstimate:
    """
    Ē^L[ξ] 的估计：控制族上蒙特卡洛均值的最大值

    :param functional: 批量泛函 (times, values) -> (n,)
    :param family: ControlFamily 或 ControlLaw 列表
    """
    if not isinstance(family, ControlFamily) and not list(family):
        raise ConfigurationError("控制族为空")
    sampler = ControlledSampler(spec, n, seed, pool)
    return _optimize(sampler, functional, family, 1.0, restarts, max_sweeps)


def lower_expectation(functional: BatchFunctional, spec: MeasureFamilySpec, family, n: int, seed: int,
                      pool: Optional[WorkerPool] = None, restarts: int = 3, max_sweeps: int = 3) -> MCEstimate:
    """E̲^L[ξ] = −Ē^L[−ξ]"""
    negated = (lambda times, values: -np.asarray(functional(times, values), dtype=float))
    est = upper_expectation(negated, spec, family, n, seed, pool, restarts, max_sweeps)
    return MCEstimate(value=-est.value, stderr=est.stderr, n_samples=est.n_samples, argmax=est.argmax)


def wiener_mean(functional: BatchFunctional, spec: MeasureFamilySpec, n: int, seed: int,
                pool: Optional[WorkerPool] = None) -> MCEstimate:
    """Wiener 测度下的普通蒙特卡洛均值（需要 2L ≥ 1）"""
    if not spec.includes_wiener:
        raise PreconditionError(f"2L={2 * spec.L} < 1，Wiener 测度不在 P_L 内")
    sampler = ControlledSampler(spec, n, seed, pool)
    mean, stderr = sampler.estimate(functional, wiener_law(spec.d))
    return MCEstimate(value=mean, stderr=stderr, n_samples=n, argmax="wiener")


# ----------------------------------------------------------------------
# 一维 HJB 预言机
# ----------------------------------------------------------------------
def hjb_oracle_1d(terminal: Callable[[np.ndarray], np.ndarray], L: float, T: float,
                  space_grid: np.ndarray, time_grid: np.ndarray, x0: float = 0.0) -> float:
    """
    d = 1 时 Ē^L[g(B_T)] 的确定性预言机

    ∂_t v + L|v_x| + L(v_xx)^+ = 0，v(T) = g；显式单调迎风格式向后推进，
    截断边界处按线性外推。

    :param terminal: 终端函数 g，向量化
    :param space_grid: 均匀空间网格
    :param time_grid: [0, T] 上的均匀时间网格
    :return: v(0, x0)
    """
    x = np.asarray(space_grid, dtype=float)
    times = np.asarray(time_grid, dtype=float)
    if x.shape[0] < 3:
        raise ConfigurationError("空间网格至少需要 3 个节点")
    dx = float(x[1] - x[0])
    dt = float(np.max(np.diff(times)))
    limit = dx * dx / (2.0 * L + L * dx)
    if dt > limit * (1 + 1e-12):
        raise ConfigurationError(f"CFL 不满足: Δt={dt} > Δx²/(2L+LΔx)={limit}")
    if abs(times[-1] - T) > 1e-12 * max(1.0, T):
        raise ConfigurationError(f"时间网格终点 {times[-1]} 与 T={T} 不符")
    v = np.asarray(terminal(x), dtype=float).copy()
    steps = np.diff(times)[::-1]
    for h in steps:
        forward = (v[2:] - v[1:-1]) / dx
        backward = (v[1:-1] - v[:-2]) / dx
        second = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (dx * dx)
        drift = L * np.maximum(np.maximum(forward, -backward), 0.0)
        diffusion = L * np.maximum(second, 0.0)
        inner = v[1:-1] + h * (drift + diffusion)
        v = np.concatenate([[2.0 * inner[0] - inner[1]], inner, [2.0 * inner[-1] - inner[-2]]])
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("HJB 预言机数值发散")
    return float(np.interp(x0, x, v))
