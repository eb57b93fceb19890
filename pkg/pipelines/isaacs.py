"""
路径依赖 Isaacs 方程的博弈值（强形式）

    dX = σ(s, X, α, β) dB_s,   −dY = f(s, X, Y, α, β) ds − Z dB_s,   Y_T = ξ(X)

决策时刻取 X 的锥命中时刻（半径 ε、斜率 L1），每一步的布朗增量用 Gauss–Hermite 节点分支，
深度 m 处的叶节点用蒙特卡洛估计剩余区间上常数控制对的值矩阵。
上值在每个节点取 min_β max_α（α 方策略看到 β 当前的动作），下值取 max_α min_β。
级联值在叶节点上让系数只看到冻结路径 X̂（最后命中点的取值），并逐样本检查 ‖X − X̂‖ ≤ ε。
"""

import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import roots_hermitenorm

from core.hitting import OUTSIDE, ConeSpec, cone_classify, partition_state, segment_crossing
from core.paths import Partition, SampledPath
from pipelines.problems import ProblemConfig
from pipelines.registry import (
    GameCoefficient, GameDriver, PathFunctional, make_functional, make_game_driver, make_game_volatility,
)
from solvers.bsde import affine_bsde_samples
from solvers.nonlinear_expectation import chunk_normals, derive_seed, sample_mean
from utils.errors import BoundError, BudgetError, ConfigurationError, DomainError
from utils.logger import get_logger
from utils.parallel import WorkerPool, serial_pool

logger = get_logger(name="pipelines.isaacs")

DOMAIN_TOLERANCE = 1e-9
DEVIATION_TOLERANCE = 1e-12
_MAX_RESTARTS = 1000


@dataclass(frozen=True, eq=False)
class GameSpec:
    """
    U:  α 方（最大化）的有限控制集
    V:  β 方（最小化）的有限控制集
    L:  |∂_y f| 的声明界
    L1: 锥斜率，默认 L + 1
    """
    name: str
    T: float
    U: Tuple[float, ...]
    V: Tuple[float, ...]
    volatility: GameCoefficient
    driver: GameDriver
    terminal: PathFunctional
    L: float = 1.0
    L1: Optional[float] = None

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError(f"T 必须为正: {self.T}")
        object.__setattr__(self, "U", tuple(float(a) for a in self.U))
        object.__setattr__(self, "V", tuple(float(b) for b in self.V))
        if not self.U or not self.V:
            raise ConfigurationError("控制集 U、V 不能为空")
        if not math.isfinite(self.volatility.bound):
            raise ConfigurationError(f"σ 必须有界: {self.volatility.name}")
        if not math.isfinite(self.driver.source_bound):
            raise ConfigurationError(f"f(·, 0) 必须有界: {self.driver.name}")
        if not math.isfinite(self.terminal.bound):
            raise ConfigurationError(f"终端泛函必须有界: {self.terminal.name}")
        if self.driver.y_lipschitz > self.L + 1e-12:
            raise ConfigurationError(f"生成元 {self.driver.name} 的 y-Lipschitz 常数 {self.driver.y_lipschitz} 超过 L={self.L}")
        if self.L1 is None:
            object.__setattr__(self, "L1", self.L + 1.0)

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.U), len(self.V)

    def sigma(self, s, current, i: int, j: int) -> np.ndarray:
        return self.volatility(s, current, self.U[i], self.V[j])

    def coefficients(self, s, current, i: int, j: int):
        return self.driver(s, current, self.U[i], self.V[j])

    def hamiltonian(self, s: float, current: float, y: float, z: float, gamma: float) -> np.ndarray:
        """
        (|U|, |V|) 矩阵 ½σ²γ + f(s, ω, y, zσ, α, β)

        生成元不依赖 z，z 只为接口完整而保留。
        """
        cur = np.array([float(current)])
        H = np.empty(self.shape)
        for i, j in itertools.product(range(len(self.U)), range(len(self.V))):
            sigma = float(self.sigma(s, cur, i, j)[0])
            a, f0 = (float(v[0]) for v in self.coefficients(s, cur, i, j))
            H[i, j] = 0.5 * sigma * sigma * gamma + a * y + f0
        return H

    def with_controls(self, U: Optional[Sequence[float]] = None, V: Optional[Sequence[float]] = None) -> "GameSpec":
        return replace(self, U=tuple(self.U if U is None else U), V=tuple(self.V if V is None else V))

    @classmethod
    def from_config(cls, config: ProblemConfig) -> "GameSpec":
        config.check_keys(["kind", "name", "description", "T", "U", "V", "L", "L1",
                           "volatility", "driver", "terminal", "game"])
        controls = {}
        for key in ("U", "V"):
            values = config.get(key, required=True, kind=list)
            if not values or any(isinstance(a, bool) or not isinstance(a, (int, float)) for a in values):
                config.fail(key, f"应为非空数值列表，实际为 {values!r}")
            controls[key] = tuple(float(a) for a in values)
        parts = {}
        for key, factory in (("volatility", make_game_volatility), ("driver", make_game_driver)):
            section = config.section(key)
            try:
                parts[key] = factory(section.get("type", required=True, kind=str), controls["U"], controls["V"],
                                     **section.params())
            except ConfigurationError as e:
                section.fail("type", str(e))
        section = config.section("terminal")
        try:
            parts["terminal"] = make_functional(section.get("type", required=True, kind=str), **section.params())
        except ConfigurationError as e:
            section.fail("type", str(e))
        L = config.get("L", 1.0, kind=float, positive=True)
        try:
            return cls(
                name=config.get("name", config.source, kind=str),
                T=config.get("T", required=True, kind=float, positive=True),
                L=L,
                L1=config.get("L1", L + 1.0, kind=float, positive=True),
                **controls,
                **parts,
            )
        except ConfigurationError as e:
            config.fail(None, str(e))


@dataclass(frozen=True)
class GameConfig:
    """
    epsilon:        命中网格的锥半径
    depth:          博弈树深度 m（决策次数）
    samples:        叶节点蒙特卡洛样本数
    step:           叶节点 Euler 步长，默认 T/100
    branching:      每步布朗分支数（Gauss–Hermite 节点）
    max_nodes:      博弈树节点预算
    max_strategies: 穷举策略的预算
    """
    epsilon: float = 0.2
    depth: int = 2
    samples: int = 1000
    seed: int = 0
    step: Optional[float] = None
    branching: int = 3
    max_nodes: int = 200_000
    max_strategies: int = 4096

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"ε 必须为正: {self.epsilon}")
        if self.depth < 1:
            raise ConfigurationError(f"博弈树深度必须 >= 1: {self.depth}")
        if self.samples < 2:
            raise ConfigurationError(f"蒙特卡洛样本数必须 >= 2: {self.samples}")
        if self.branching < 1:
            raise ConfigurationError(f"分支数必须 >= 1: {self.branching}")

    def n_steps(self, span: float, T: float) -> int:
        step = T / 100.0 if self.step is None else self.step
        return max(1, int(math.ceil(span / step - 1e-9)))

    @classmethod
    def from_config(cls, section: ProblemConfig, **overrides) -> "GameConfig":
        section.check_keys(["epsilon", "depth", "samples", "seed", "step", "branching", "max_nodes", "max_strategies"])
        values = {
            "epsilon": section.get("epsilon", 0.2, kind=float, positive=True),
            "depth": section.get("depth", 2, kind=int, positive=True),
            "samples": section.get("samples", 1000, kind=int, positive=True),
            "seed": section.get("seed", 0, kind=int, nonnegative=True),
            "step": section.get("step", None, kind=float, positive=True),
            "branching": section.get("branching", 3, kind=int, positive=True),
            "max_nodes": section.get("max_nodes", 200_000, kind=int, positive=True),
            "max_strategies": section.get("max_strategies", 4096, kind=int, positive=True),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class GameValue:
    value: float
    stderr: float
    n_samples: int
    depth: int
    nodes: int
    leaves: int
    upper: bool
    max_deviation: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------
# 博弈树
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GameStep:
    """控制对 (α_i, β_j) 下的一步：Y_s = Σ_z w_z (decay_z·Y_z + source_z)"""
    decay: np.ndarray
    source: np.ndarray
    children: Tuple["GameNode", ...]


@dataclass(eq=False)
class GameNode:
    """
    key:            到达本节点的历史 ((i, j, z), ...)
    x:              X 在 s 的取值
    hit_x, hit_t:   最后命中点，冻结路径 X̂ 在 s 的取值为 hit_x
    knots_t/knots_v: s 之前的路径节点，供终端泛函使用
    """
    key: Tuple[Tuple[int, int, int], ...]
    s: float
    x: float
    hit_x: float
    hit_t: float
    knots_t: Tuple[float, ...]
    knots_v: Tuple[float, ...]
    children: Dict[Tuple[int, int], GameStep] = field(default_factory=dict)
    leaf_values: Optional[np.ndarray] = None
    leaf_stderr: Optional[np.ndarray] = None
    terminal_value: Optional[float] = None

    @property
    def depth(self) -> int:
        return len(self.key)

    @property
    def is_terminal(self) -> bool:
        return self.terminal_value is not None

    @property
    def is_leaf(self) -> bool:
        return self.leaf_values is not None


def branching_nodes(points: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """标准正态的 Gauss–Hermite 节点与归一化权重"""
    z, w = roots_hermitenorm(points)
    return np.asarray(z, dtype=float), np.asarray(w, dtype=float) / float(np.sum(w))


def exit_increment(offset: float, scale: np.ndarray, radius: float, slope: float) -> np.ndarray:
    """
    最小的 v > 0 使 |offset + scale·v| + slope·v² = radius，对应步长 u = v²

    |offset| ≤ radius。offset = 0 时即 v = (−|scale| + sqrt(scale² + 4·slope·radius)) / (2·slope)。
    """
    scale = np.asarray(scale, dtype=float)
    best = np.full(scale.shape, np.inf)
    for sign in (1.0, -1.0):
        b = sign * scale
        c = sign * offset - radius
        v = (-b + np.sqrt(b * b - 4.0 * slope * c)) / (2.0 * slope)
        valid = sign * (offset + scale * v) >= -1e-12
        best = np.where(valid, np.minimum(best, v), best)
    return np.where(np.isfinite(best), best, math.sqrt(max(radius, 0.0) / slope))


def saddle_choice(matrix: np.ndarray, upper: bool) -> Tuple[int, int]:
    """上值：j* = argmin_j max_i M，i* = argmax_i M[:, j*]；下值对称"""
    if upper:
        j = int(np.argmin(matrix.max(axis=0)))
        return int(np.argmax(matrix[:, j])), j
    i = int(np.argmax(matrix.min(axis=1)))
    return i, int(np.argmin(matrix[i, :]))


def _frozen_step(spec: GameSpec, i: int, j: int, epsilon: float, s: float, h: float, x: np.ndarray,
                 hit_x: np.ndarray, hit_t: np.ndarray, dW: np.ndarray):
    """
    冻结系数下推进一个网格步

    步内 X 按最后命中点处的 σ 线性前进；越过锥面时在交点处重置命中点与 σ，余下部分按新的 σ 继续。
    """
    L1 = spec.L1
    pos = x.copy()
    hx = hit_x.copy()
    ht = hit_t.copy()
    consumed = np.zeros(x.shape[0])
    sigma = np.array(spec.sigma(s, hx, i, j), dtype=float)
    pending = np.ones(x.shape[0], dtype=bool)
    for _ in range(_MAX_RESTARTS):
        idx = np.flatnonzero(pending)
        if not idx.size:
            break
        rest = (1.0 - consumed[idx]) * h
        increment = sigma[idx] * dW[idx] * (1.0 - consumed[idx])
        offset = pos[idx] - hx[idx]
        k0 = epsilon - L1 * (s + consumed[idx] * h - ht[idx])
        crossed = (np.abs(offset + increment) + L1 * rest >= k0) & (rest > 0)
        done = idx[~crossed]
        pos[done] += increment[~crossed]
        pending[done] = False
        c_idx = idx[crossed]
        if not c_idx.size:
            continue
        rate = increment[crossed] / rest[crossed]
        u = segment_crossing(offset[crossed][:, None], rate[:, None], k0[crossed], L1,
                             np.zeros(c_idx.size), rest[crossed])
        pos[c_idx] += rate * u
        consumed[c_idx] = np.minimum(consumed[c_idx] + u / h, 1.0)
        hx[c_idx] = pos[c_idx]
        ht[c_idx] = s + consumed[c_idx] * h
        sigma[c_idx] = spec.sigma(s, hx[c_idx], i, j)
    else:
        raise RuntimeError(f"单个网格步内命中超过 {_MAX_RESTARTS} 次")
    return pos, hx, ht


def _leaf_samples(spec: GameSpec, node: GameNode, i: int, j: int, normals: np.ndarray, epsilon: float,
                  frozen: bool) -> Tuple[np.ndarray, float]:
    """叶节点上常数控制对 (α_i, β_j) 的逐样本 Y 值与最大冻结偏差"""
    n, K = normals.shape
    grid = np.linspace(node.s, spec.T, K + 1)
    h = np.diff(grid)
    dW = normals * np.sqrt(h)[None, :]
    X = np.empty((n, K + 1))
    seen = np.empty((n, K + 1))
    X[:, 0] = node.x
    hit_x = np.full(n, node.hit_x)
    hit_t = np.full(n, node.hit_t)
    seen[:, 0] = hit_x if frozen else X[:, 0]
    a = np.empty((n, K))
    f0 = np.empty((n, K))
    deviation = float(np.max(np.abs(X[:, 0] - hit_x))) if frozen else 0.0
    for k in range(K):
        a[:, k], f0[:, k] = spec.coefficients(grid[k], seen[:, k], i, j)
        if frozen:
            X[:, k + 1], hit_x, hit_t = _frozen_step(spec, i, j, epsilon, grid[k], h[k], X[:, k],
                                                     hit_x, hit_t, dW[:, k])
            seen[:, k + 1] = hit_x
            deviation = max(deviation, float(np.max(np.abs(X[:, k + 1] - hit_x))))
        else:
            X[:, k + 1] = X[:, k] + spec.sigma(grid[k], X[:, k], i, j) * dW[:, k]
            seen[:, k + 1] = X[:, k + 1]
    # 终端时刻本身是命中点
    seen[:, -1] = X[:, -1]
    times = np.concatenate([np.asarray(node.knots_t, dtype=float), grid])
    prefix = np.broadcast_to(np.asarray(node.knots_v, dtype=float), (n, len(node.knots_v)))
    g = spec.terminal(times, np.concatenate([prefix, seen], axis=1)[:, :, None])
    return affine_bsde_samples(h, g, a, f0), deviation


class GameTree:
    """
    有限博弈树：逐层展开，深度 m 处做叶节点蒙特卡洛

    frozen=True 时系数只看到冻结路径（级联值），否则看到 X 本身（直接值）。
    """

    def __init__(self, spec: GameSpec, config: GameConfig, root: GameNode, frozen: bool = False,
                 pool: Optional[WorkerPool] = None):
        self.spec = spec
        self.config = config
        self.root = root
        self.frozen = frozen
        self.pool = pool or serial_pool()
        self.z, self.w = branching_nodes(config.branching)
        self.nodes = 1
        self.leaves: List[GameNode] = []
        self.max_deviation = abs(root.x - root.hit_x) if frozen else 0.0

    @property
    def branching(self) -> int:
        nU, nV = self.spec.shape
        return nU * nV * len(self.z)

    def check_budget(self):
        b = self.branching
        total = 0
        admissible = 0
        for depth in range(self.config.depth + 1):
            total += b ** depth
            if total > self.config.max_nodes:
                raise BudgetError(
                    f"博弈树节点数超过预算 {self.config.max_nodes}（深度 {self.config.depth}，每层分支 {b}），"
                    f"可行的最大深度为 {admissible}", max_depth=admissible)
            admissible = depth

    def seen(self, node: GameNode) -> float:
        return node.hit_x if self.frozen else node.x

    def terminal(self, knots_t: Tuple[float, ...], knots_v: Tuple[float, ...]) -> float:
        times = np.asarray(knots_t, dtype=float)
        values = np.asarray(knots_v, dtype=float)[None, :, None]
        return float(self.spec.terminal(times, values)[0])

    def expand(self, node: GameNode) -> Tuple[List[GameNode], float]:
        spec = self.spec
        T, L1, eps = spec.T, spec.L1, self.config.epsilon
        seen = self.seen(node)
        cur = np.array([seen])
        offset = node.x - node.hit_x
        radius = eps - L1 * (node.s - node.hit_t)
        knots_t = node.knots_t + (node.s,)
        knots_v = node.knots_v + (seen,)
        created: List[GameNode] = []
        deviation = 0.0
        for i, j in itertools.product(range(len(spec.U)), range(len(spec.V))):
            sigma = float(spec.sigma(node.s, cur, i, j)[0])
            a, f0 = (float(v[0]) for v in spec.coefficients(node.s, cur, i, j))
            v = exit_increment(offset, sigma * self.z, radius, L1)
            u = np.minimum(v * v, T - node.s)
            v = np.sqrt(u)
            decay = np.exp(a * u)
            source = f0 * np.where(a != 0.0, np.expm1(a * u) / (a if a != 0.0 else 1.0), u)
            children = []
            for zi in range(len(self.z)):
                x_next = node.x + sigma * self.z[zi] * v[zi]
                s_next = node.s + float(u[zi])
                deviation = max(deviation, abs(x_next - node.hit_x))
                child = GameNode(key=node.key + ((i, j, zi),), s=s_next, x=x_next, hit_x=x_next, hit_t=s_next,
                                 knots_t=knots_t, knots_v=knots_v)
                if s_next >= T - 1e-12:
                    child.s = T
                    child.terminal_value = self.terminal(knots_t + (T,), knots_v + (x_next,))
                children.append(child)
            node.children[(i, j)] = GameStep(decay=decay, source=source, children=tuple(children))
            created.extend(children)
        return created, deviation

    def evaluate_leaf(self, node: GameNode) -> Tuple[np.ndarray, np.ndarray, float]:
        spec, config = self.spec, self.config
        K = config.n_steps(spec.T - node.s, spec.T)
        flat = [v for entry in node.key for v in entry]
        normals = chunk_normals(derive_seed(config.seed, "leaf", *flat), 0, config.samples, K, 1)[:, :, 0]
        values = np.empty(spec.shape)
        stderr = np.empty(spec.shape)
        deviation = 0.0
        for i, j in itertools.product(range(len(spec.U)), range(len(spec.V))):
            samples, dev = _leaf_samples(spec, node, i, j, normals, config.epsilon, self.frozen)
            values[i, j], stderr[i, j] = sample_mean(samples)
            deviation = max(deviation, dev)
        return values, stderr, deviation

    def build(self) -> "GameTree":
        if self.root.s >= self.spec.T:
            self.root.terminal_value = self.terminal(self.root.knots_t + (self.spec.T,),
                                                     self.root.knots_v + (self.root.x,))
            return self
        self.check_budget()
        level = [self.root]
        for _ in range(self.config.depth):
            expanded = self.pool.map_ordered(self.expand, level)
            level = []
            for children, deviation in expanded:
                self.nodes += len(children)
                self.max_deviation = max(self.max_deviation, deviation)
                level.extend(child for child in children if not child.is_terminal)
            if not level:
                break
        for node, (values, stderr, deviation) in zip(level, self.pool.map_ordered(self.evaluate_leaf, level)):
            node.leaf_values, node.leaf_stderr = values, stderr
            self.max_deviation = max(self.max_deviation, deviation)
        self.leaves = level
        logger.debug(f"博弈树 {self.spec.name}: 节点 {self.nodes}，叶节点 {len(level)}，冻结={self.frozen}")
        return self

    def matrix(self, node: GameNode, upper: bool, record: Optional[dict] = None) -> Tuple[np.ndarray, np.ndarray]:
        """节点上的值矩阵及其方差"""
        if node.is_leaf:
            return node.leaf_values, node.leaf_stderr ** 2
        M = np.empty(self.spec.shape)
        var = np.empty(self.spec.shape)
        for (i, j), step in node.children.items():
            solved = [self.solve(child, upper, record) for child in step.children]
            values = np.array([v for v, _ in solved])
            variances = np.array([s for _, s in solved])
            M[i, j] = float(np.sum(self.w * (step.decay * values + step.source)))
            var[i, j] = float(np.sum((self.w * step.decay) ** 2 * variances))
        return M, var

    def solve(self, node: GameNode, upper: bool, record: Optional[dict] = None) -> Tuple[float, float]:
        """倒向归纳，返回 (值, 方差)"""
        if node.is_terminal:
            return float(node.terminal_value), 0.0
        M, var = self.matrix(node, upper, record)
        if record is not None:
            record[node.key] = M
        i, j = saddle_choice(M, upper)
        return float(M[i, j]), float(var[i, j])

    def value(self, upper: bool = True) -> GameValue:
        value, variance = self.solve(self.root, upper)
        return GameValue(value=value, stderr=math.sqrt(max(variance, 0.0)), n_samples=self.config.samples,
                         depth=self.config.depth, nodes=self.nodes, leaves=len(self.leaves), upper=upper,
                         max_deviation=self.max_deviation if self.frozen else None)

    def mesh(self, upper: bool = True) -> "StrategyMesh":
        nU, nV = self.spec.shape
        own, opponent = (nU, nV) if upper else (nV, nU)
        return StrategyMesh(depth=self.config.depth, own=own, opponent=opponent, branches=len(self.z))

    def play(self, strategy: Dict, controls: Dict, upper: bool = True) -> float:
        """
        给定策略与对手的适应控制，沿树求值

        strategy: 信息集 (历史, 对手当前动作) -> 己方动作
        controls: 布朗分支历史 -> 对手动作
        叶节点的值矩阵按同一类型的鞍点取值。
        """
        def walk(node: GameNode, branches: Tuple[int, ...], history: Tuple) -> float:
            if node.is_terminal:
                return float(node.terminal_value)
            if node.is_leaf:
                i, j = saddle_choice(node.leaf_values, upper)
                return float(node.leaf_values[i, j])
            opp = controls[branches]
            own = strategy[(history, opp)]
            step = node.children[(own, opp) if upper else (opp, own)]
            total = 0.0
            for zi, child in enumerate(step.children):
                y = walk(child, branches + (zi,), history + ((own, opp, zi),))
                total += self.w[zi] * (step.decay[zi] * y + step.source[zi])
            return total

        return walk(self.root, (), ())


# ----------------------------------------------------------------------
# 策略
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class StrategyMesh:
    """
    命中网格上的策略空间

    第 k 个决策时刻的信息集为 (之前的历史 ((own, opp, z), ...), 对手在第 k 步的动作)。
    策略是信息集到己方动作的映射，只依赖第 k 步及之前的对手动作。
    """
    depth: int
    own: int
    opponent: int
    branches: int

    def histories(self, k: int) -> Iterator[Tuple]:
        entries = list(itertools.product(range(self.own), range(self.opponent), range(self.branches)))
        return itertools.product(entries, repeat=k)

    def information_sets(self) -> List[Tuple]:
        return [(history, opp) for k in range(self.depth) for history in self.histories(k)
                for opp in range(self.opponent)]

    def count(self, depth: Optional[int] = None) -> int:
        depth = self.depth if depth is None else depth
        per_level = self.own * self.opponent * self.branches
        sets = sum(per_level ** k for k in range(depth)) * self.opponent
        return self.own ** sets

    def move(self, strategy: Dict, history: Sequence[Tuple[int, int, int]], opponent_moves: Sequence[int],
             k: int) -> int:
        """第 k 个决策时刻的动作；只读取 history[:k] 与 opponent_moves[k]"""
        return strategy[(tuple(tuple(e) for e in history[:k]), int(opponent_moves[k]))]


def _admissible_depth(counter, depth: int, cap: int) -> int:
    admissible = 0
    for d in range(1, depth + 1):
        if counter(d) > cap:
            break
        admissible = d
    return admissible


def enumerate_strategies(mesh: StrategyMesh, max_strategies: int = 4096) -> Iterator[Dict]:
    """穷举信息集映射；数量超过预算时抛出 BudgetError"""
    total = mesh.count()
    if total > max_strategies:
        admissible = _admissible_depth(mesh.count, mesh.depth, max_strategies)
        raise BudgetError(f"策略数 {total} 超过预算 {max_strategies}，可行的最大深度为 {admissible}",
                          max_depth=admissible)
    sets = mesh.information_sets()
    for moves in itertools.product(range(mesh.own), repeat=len(sets)):
        yield dict(zip(sets, moves))


def brute_force_value(tree: GameTree, upper: bool = True, max_strategies: Optional[int] = None) -> float:
    """
    穷举策略求 sup_λ inf_β（上值）或 inf_μ sup_α（下值），用于交叉检验倒向归纳

    对手的控制是布朗分支历史的函数（适应过程）。
    """
    cap = tree.config.max_strategies if max_strategies is None else max_strategies
    mesh = tree.mesh(upper)
    branch_histories = [h for k in range(mesh.depth) for h in itertools.product(range(mesh.branches), repeat=k)]

    def combos(depth: int) -> int:
        n_hist = sum(mesh.branches ** k for k in range(depth))
        return mesh.count(depth) * mesh.opponent ** n_hist

    if combos(mesh.depth) > cap:
        admissible = _admissible_depth(combos, mesh.depth, cap)
        raise BudgetError(f"策略-控制组合数 {combos(mesh.depth)} 超过预算 {cap}，可行的最大深度为 {admissible}",
                          max_depth=admissible)
    outer, inner = (max, min) if upper else (min, max)
    best = None
    for strategy in enumerate_strategies(mesh, cap):
        worst = None
        for choice in itertools.product(range(mesh.opponent), repeat=len(branch_histories)):
            value = tree.play(strategy, dict(zip(branch_histories, choice)), upper)
            worst = value if worst is None else inner(worst, value)
        best = worst if best is None else outer(best, worst)
    return float(best)


def extract_strategy(tree: GameTree, upper: bool = True) -> Dict:
    """倒向归纳给出的最优信息集映射：对手每个当前动作下的最优应对"""
    record: Dict = {}
    tree.solve(tree.root, upper, record)
    strategy = {}
    for key, M in record.items():
        history = tuple(_own_view(entry, upper) for entry in key)
        if upper:
            for j in range(M.shape[1]):
                strategy[(history, j)] = int(np.argmax(M[:, j]))
        else:
            for i in range(M.shape[0]):
                strategy[(history, i)] = int(np.argmin(M[i, :]))
    return strategy


def _own_view(entry: Tuple[int, int, int], upper: bool) -> Tuple[int, int, int]:
    i, j, z = entry
    return (i, j, z) if upper else (j, i, z)


# ----------------------------------------------------------------------
# 值函数
# ----------------------------------------------------------------------
def _direct_root(spec: GameSpec, t: float, omega: SampledPath) -> GameNode:
    if omega.dim != 1:
        raise DomainError(f"只支持一维路径: dim={omega.dim}")
    if not omega.covers(omega.t_start, t) or t > spec.T:
        raise DomainError(f"路径 [{omega.t_start}, {omega.t_end}] 未覆盖 t={t} 或 t > T={spec.T}")
    mask = omega.times < t
    x = float(omega.value_at(t)[0])
    return GameNode(key=(), s=float(t), x=x, hit_x=x, hit_t=float(t),
                    knots_t=tuple(float(v) for v in omega.times[mask]),
                    knots_v=tuple(float(v) for v in omega.values[mask, 0]))


def build_game_tree(spec: GameSpec, t: float, omega: SampledPath, config: GameConfig,
                    pool: Optional[WorkerPool] = None) -> GameTree:
    """从 (t, ω) 出发的直接博弈树（系数看到 X 本身）"""
    return GameTree(spec, config, _direct_root(spec, t, omega), frozen=False, pool=pool).build()


def game_values(spec: GameSpec, t: float, omega: SampledPath, config: GameConfig,
                pool: Optional[WorkerPool] = None) -> Dict[str, GameValue]:
    """同一棵树上的上值与下值"""
    tree = build_game_tree(spec, t, omega, config, pool)
    upper, lower = tree.value(True), tree.value(False)
    logger.info(f"博弈 {spec.name}: 上值 {upper.value:.6f}，下值 {lower.value:.6f}，节点 {tree.nodes}")
    return {"upper": upper, "lower": lower}


def game_value_upper(spec: GameSpec, t: float, omega: SampledPath, config: GameConfig,
                     pool: Optional[WorkerPool] = None) -> GameValue:
    return build_game_tree(spec, t, omega, config, pool).value(True)


def game_value_lower(spec: GameSpec, t: float, omega: SampledPath, config: GameConfig,
                     pool: Optional[WorkerPool] = None) -> GameValue:
    return build_game_tree(spec, t, omega, config, pool).value(False)


def game_cascade_value(spec: GameSpec, pi: Partition, t: float, x: float, config: GameConfig,
                       pool: Optional[WorkerPool] = None, upper: bool = True) -> GameValue:
    """
    级联值 θ_n^ε(π_n; t, x̄)

    :param pi: 已发生的命中划分
    :param x: 相对最后划分点的位移 x̄，(t, x̄) 必须在以 (t_n, S) 为顶点的锥内
    """
    t_n = pi.last_time()
    if t < t_n or t > spec.T:
        raise DomainError(f"t={t} 不在 [{t_n}, {spec.T}] 内")
    if t < spec.T:
        cone = ConeSpec(t_n, config.epsilon, spec.L1, spec.T)
        if cone_classify(cone, t, [x], tolerance=DOMAIN_TOLERANCE) == OUTSIDE:
            raise DomainError(f"(t={t}, x̄={x}) 在以 t_n={t_n} 为顶点的锥外")
    times = np.concatenate([[0.0], pi.times])
    values = np.concatenate([[0.0], np.cumsum(pi.increments[:, 0])]) if len(pi) else np.zeros(1)
    mask = times < t
    S = float(pi.position[0])
    root = GameNode(key=(), s=float(t), x=S + float(x), hit_x=S, hit_t=float(t_n),
                    knots_t=tuple(float(v) for v in times[mask]), knots_v=tuple(float(v) for v in values[mask]))
    tree = GameTree(spec, config, root, frozen=True, pool=pool).build()
    if tree.max_deviation > config.epsilon + DEVIATION_TOLERANCE:
        raise BoundError(f"冻结路径偏差 {tree.max_deviation:.3e} 超过 ε={config.epsilon}")
    return tree.value(upper)


def cascade_state(omega: SampledPath, t: float, epsilon: float, L1: float) -> Tuple[Partition, float]:
    """路径在 t 时刻的 (π_n, x̄)"""
    pi, x_bar = partition_state(omega, t, epsilon, L1)
    return pi, float(x_bar[0])


# ----------------------------------------------------------------------
# 检查
# ----------------------------------------------------------------------
def isaacs_condition_check(spec: GameSpec, sample_points: Optional[Sequence[Tuple[float, ...]]] = None,
                           n_points: int = 20, seed: int = 0, tolerance: float = 1e-12) -> dict:
    """
    在样本点 (t, ω_t, y, z, γ) 上比较 inf_β sup_α H 与 sup_α inf_β H

    样本点缺省时随机生成。
    """
    if sample_points is None:
        rng = np.random.default_rng(derive_seed(seed, "isaacs"))
        sample_points = list(zip(rng.uniform(0.0, spec.T, n_points), rng.normal(size=n_points),
                                 rng.normal(size=n_points), rng.normal(size=n_points), rng.normal(size=n_points)))
    worst = 0.0
    worst_point = None
    for point in sample_points:
        t, current, y, z, gamma = (float(v) for v in point)
        H = spec.hamiltonian(t, current, y, z, gamma)
        gap = float(H.max(axis=0).min() - H.min(axis=1).max())
        if gap > worst:
            worst, worst_point = gap, (t, current, y, z, gamma)
    success = worst <= tolerance
    if not success:
        logger.warning(f"博弈 {spec.name} 不满足 Isaacs 条件: 最大差 {worst:.6g}")
    return {"success": success, "isaacs_gap": worst, "tolerance": tolerance, "points": len(sample_points),
            "worst_point": worst_point}


def value_equality_check(spec: GameSpec, t: float, omega: SampledPath, config: GameConfig,
                         pool: Optional[WorkerPool] = None) -> dict:
    """
    上下值相等性检查

    只有 Isaacs 条件成立时才断言相等；不成立时只报告差值。上值不低于下值始终检查。
    """
    isaacs = isaacs_condition_check(spec, seed=config.seed)
    values = game_values(spec, t, omega, config, pool)
    upper, lower = values["upper"], values["lower"]
    gap = upper.value - lower.value
    tolerance = 3.0 * math.hypot(upper.stderr, lower.stderr) + 1e-12
    equal = abs(gap) <= tolerance
    ordered = gap >= -tolerance
    asserted = isaacs["success"]
    success = ordered and (equal or not asserted)
    if asserted and not equal:
        logger.warning(f"满足 Isaacs 条件但上下值之差 {gap:.6g} 超过容差 {tolerance:.3g}")
    return {"success": success, "asserted": asserted, "upper": upper.value, "lower": lower.value,
            "upper_stderr": upper.stderr, "lower_stderr": lower.stderr, "value_gap": gap,
            "isaacs_gap": isaacs["isaacs_gap"], "tolerance": tolerance, "ordered": ordered}


def strategy_enrichment_check(spec: GameSpec, t: float, omega: SampledPath, config: GameConfig,
                              depths: Sequence[int] = (1, 2), pool: Optional[WorkerPool] = None) -> dict:
    """加深网格（策略更丰富）后上值不减，容差为相邻两次估计的 3 倍合成标准误"""
    rows = []
    for depth in sorted(depths):
        value = game_value_upper(spec, t, omega, replace(config, depth=depth), pool)
        rows.append({"depth": depth, "upper": value.value, "stderr": value.stderr})
    success = all(b["upper"] >= a["upper"] - 3.0 * math.hypot(a["stderr"], b["stderr"]) - 1e-12
                  for a, b in zip(rows, rows[1:]))
    return {"success": success, "rows": rows}


def cascade_epsilon_sweep(spec: GameSpec, config: GameConfig, epsilons: Sequence[float] = (0.4, 0.2, 0.1),
                          pool: Optional[WorkerPool] = None) -> dict:
    """原点处级联值与直接值之差随 ε 的变化"""
    omega = SampledPath.zero(0.0, spec.T)
    rows = []
    for eps in sorted(epsilons, reverse=True):
        cfg = replace(config, epsilon=eps)
        empty = Partition(epsilon=eps, dim=1)
        direct = game_value_upper(spec, 0.0, omega, cfg, pool)
        cascade = game_cascade_value(spec, empty, 0.0, 0.0, cfg, pool)
        rows.append({"epsilon": eps, "direct": direct.value, "cascade": cascade.value,
                     "gap": abs(cascade.value - direct.value), "max_deviation": cascade.max_deviation})
    gaps = [row["gap"] for row in rows]
    decreasing = all(b <= a for a, b in zip(gaps, gaps[1:]))
    if not decreasing:
        logger.warning(f"级联与直接值之差未随 ε 单调减小: {gaps}")
    return {"success": decreasing, "rows": rows}
