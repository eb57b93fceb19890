"""
锥形命中时间

H^{t,x,R} = inf{s ≥ t : |x + B_s − B_t| + L1·(s − t) ≥ R} ∧ T

职责：
1. 单条分段线性路径上的精确命中时间（有理数判定 + 浮点二分），支持马氏重启的精确检验
2. 递归命中序列 H_n^ε 与划分 π_n^ε 的提取
3. 锥域分类
4. 比较用的两个变体命中时间 Ĥ_ε 与 H*_ε
5. 统一时间网格上的批量（向量化）命中序列，供蒙特卡洛使用

精确性约定：交叉判定 |c + ω_s|² ≥ (K − L1·s)² 在有理数上精确计算，
返回的是线段内满足判定的最小浮点数，因此重启后的结果与原结果逐位相同。
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.paths import Partition, PartitionPoint, Point, SampledPath, as_point
from utils.errors import ConfigurationError, DimensionError, DomainError, PreconditionError
from utils.logger import get_logger

logger = get_logger(name="core.hitting")

INTERIOR = "interior"
LATERAL = "lateral_boundary"
TERMINAL = "terminal_boundary"
OUTSIDE = "outside"

KIND_LATERAL = "lateral"
KIND_TERMINAL = "terminal"

# 浮点猜测附近逐 ulp 修正的步数，超过后改用二分
_ULP_WALK = 8


@dataclass(frozen=True)
class ConeSpec:
    """
    锥 {(s, x): |x| + L1·(s − t0) < R, s < T}

    t0:      锥顶时间
    radius:  底面半径 R
    slope:   L1（通常为 L + 1，在配置加载时计算）
    horizon: 终端时间 T
    """
    t0: float
    radius: float
    slope: float
    horizon: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError(f"锥半径必须为正: R={self.radius}")
        if not self.slope >= 1:
            raise ConfigurationError(f"锥斜率必须 >= 1: L1={self.slope}")
        if not self.t0 < self.horizon:
            raise ConfigurationError(f"锥顶时间必须早于终端: t0={self.t0}, T={self.horizon}")

    @property
    def top_time(self) -> float:
        """锥的最晚时间 min(t0 + R/L1, T)"""
        return min(self.t0 + self.radius / self.slope, self.horizon)

    @property
    def reaches_terminal(self) -> bool:
        return self.t0 + self.radius / self.slope > self.horizon

    def radius_at(self, s: float) -> float:
        return self.radius - self.slope * (s - self.t0)


@dataclass(frozen=True, eq=False)
class HittingResult:
    """命中结果：时间、类型（lateral / terminal）与命中位置"""
    time: float
    kind: str
    location: np.ndarray

    @property
    def is_terminal(self) -> bool:
        return self.kind == KIND_TERMINAL


# ----------------------------------------------------------------------
# 精确判定
# ----------------------------------------------------------------------
class _ExactPath:
    """路径节点的有理数表示，用于精确的交叉判定"""

    def __init__(self, path: SampledPath):
        self.path = path
        self.times = path.times
        self.ftimes = [Fraction(float(t)) for t in path.times]
        self.fvalues = [tuple(Fraction(float(v)) for v in row) for row in path.values]
        self.dim = path.dim

    def segment(self, s: float):
        """
        s 所在线段的直线表示 ω(r) = α + β·r（r 为绝对时间）

        返回 (alpha, beta, seg_end)；最后节点之后 β = 0，seg_end = inf。
        """
        times = self.times
        if s >= times[-1]:
            return self.fvalues[-1], (Fraction(0),) * self.dim, math.inf
        k = int(np.searchsorted(times, s, side="right")) - 1
        t0, t1 = self.ftimes[k], self.ftimes[k + 1]
        p0, p1 = self.fvalues[k], self.fvalues[k + 1]
        dt = t1 - t0
        beta = tuple((b - a) / dt for a, b in zip(p0, p1))
        alpha = tuple(a - bt * t0 for a, bt in zip(p0, beta))
        return alpha, beta, float(times[k + 1])

    def value(self, s: float) -> Tuple[Fraction, ...]:
        alpha, beta, _ = self.segment(s)
        fs = Fraction(s)
        return tuple(a + b * fs for a, b in zip(alpha, beta))


def _crossed(s: float, gamma, beta, K: Fraction, slope: Fraction) -> bool:
    """|γ + β s| + slope·s ≥ K 的精确判定"""
    fs = Fraction(s)
    h = K - slope * fs
    if h <= 0:
        return True
    norm2 = sum((g + b * fs) ** 2 for g, b in zip(gamma, beta))
    return norm2 >= h * h


def _quadratic_guess(gamma, beta, K: Fraction, slope: Fraction, lo: float, hi: float) -> float:
    """平方后得到关于 s 的二次方程，取非伪根中最大者作为初值"""
    a = float(sum(b * b for b in beta) - slope * slope)
    b = float(2 * (sum(g * bt for g, bt in zip(gamma, beta)) + K * slope))
    c = float(sum(g * g for g in gamma) - K * K)
    roots = []
    if a == 0.0:
        if b != 0.0:
            roots.append(-c / b)
    else:
        disc = max(b * b - 4.0 * a * c, 0.0)
        sq = math.sqrt(disc)
        q = -0.5 * (b + math.copysign(sq, b))
        if q != 0.0:
            roots.extend([q / a, c / q])
        else:
            roots.append(-b / (2.0 * a))
    k_float, slope_float = float(K), float(slope)
    valid = [r for r in roots if math.isfinite(r) and k_float - slope_float * r >= -1e-12 * max(1.0, abs(k_float))]
    guess = max(valid) if valid else 0.5 * (lo + hi)
    return min(max(guess, lo), hi)


def _smallest_crossing(pred, lo: float, hi: float, guess: float) -> float:
    """
    (lo, hi] 内使 pred 为真的最小浮点数

    前提：pred(lo) 为假、pred(hi) 为真，且 pred 在区间上单调（凸性保证）。
    """
    s = min(max(guess, math.nextafter(lo, math.inf)), hi)
    if pred(s):
        lo_b, hi_b = lo, s
        for _ in range(_ULP_WALK):
            prev = math.nextafter(s, -math.inf)
            if prev <= lo or not pred(prev):
                return s
            s = prev
            hi_b = s
    else:
        lo_b, hi_b = s, hi
        for _ in range(_ULP_WALK):
            nxt = math.nextafter(s, math.inf)
            if nxt >= hi:
                return hi
            if pred(nxt):
                return nxt
            s = nxt
            lo_b = s
    while True:
        mid = lo_b + (hi_b - lo_b) / 2.0
        if mid <= lo_b or mid >= hi_b:
            return hi_b
        if pred(mid):
            hi_b = mid
        else:
            lo_b = mid


def _first_crossing(ep: _ExactPath, start: float, c, K: Fraction, slope: Fraction,
                    horizon: float) -> Tuple[float, bool]:
    """
    从 start 起 |c + ω_s| + slope·s ≥ K 的首个时刻（∧ horizon）

    :return: (时间, 是否在 horizon 之前命中)
    """
    alpha, beta, seg_end = ep.segment(start)
    gamma = tuple(ci + ai for ci, ai in zip(c, alpha))
    if _crossed(start, gamma, beta, K, slope):
        return start, start < horizon
    lo = start
    while lo < horizon:
        hi = min(seg_end, horizon)
        pred = (lambda s, g=gamma, b=beta: _crossed(s, g, b, K, slope))
        if pred(hi):
            guess = _quadratic_guess(gamma, beta, K, slope, lo, hi)
            s = _smallest_crossing(pred, lo, hi, guess)
            return s, s < horizon
        lo = hi
        if lo >= horizon:
            break
        alpha, beta, seg_end = ep.segment(lo)
        gamma = tuple(ci + ai for ci, ai in zip(c, alpha))
    return horizon, False


def _check_cover(path: SampledPath, t: float, T: float):
    if t < path.t_start or path.t_end < T:
        raise DomainError(f"路径定义域 [{path.t_start}, {path.t_end}] 未覆盖 [{t}, {T}]")


# ----------------------------------------------------------------------
# 公开接口
# ----------------------------------------------------------------------
def hitting_time(path: SampledPath, t: float, x: Point, spec: ConeSpec) -> HittingResult:
    """
    H^{t,x,R}：首次满足 |x + ω_s − ω_t| + L1·(s − t) ≥ R 的时刻，截断于 T

    :param path: 分段线性路径，需覆盖 [t, T]
    :param t: 起始时间（>= spec.t0）
    :param x: 起点偏移，|x| <= R
    :param spec: 锥参数
    """
    x = as_point(x)
    if x.shape[0] != path.dim:
        raise DimensionError(f"起点维度 {x.shape[0]} 与路径维度 {path.dim} 不符")
    if t < spec.t0:
        raise PreconditionError(f"起始时间 t={t} 早于锥顶 t0={spec.t0}")
    _check_cover(path, t, spec.horizon)
    fx = tuple(Fraction(float(v)) for v in x)
    fR = Fraction(spec.radius)
    if sum(v * v for v in fx) > fR * fR:
        raise PreconditionError(f"|x|={float(np.linalg.norm(x))} 超过半径 R={spec.radius}")
    ep = _ExactPath(path)
    base = ep.value(t)
    c = tuple(a - b for a, b in zip(fx, base))
    slope = Fraction(spec.slope)
    K = fR + slope * Fraction(t)
    time, lateral = _first_crossing(ep, t, c, K, slope, spec.horizon)
    location = x + path.value_at(time) - path.value_at(t)
    return HittingResult(time=time, kind=KIND_LATERAL if lateral else KIND_TERMINAL, location=location)


def markov_restart_check(path: SampledPath, t: float, x: Point, spec: ConeSpec, tau: float) -> bool:
    """
    马氏重启检验：从 (τ, x + ω_τ − ω_t, R − L1(τ − t)) 出发的命中时间与原命中时间逐位相同

    重启点的偏移与半径在有理数上精确构造，等价于在重新锚定的路径上求解。
    """
    original = hitting_time(path, t, x, spec)
    if tau < t or tau > original.time:
        raise PreconditionError(f"τ={tau} 不在 [t, H]=[{t}, {original.time}] 内")
    ep = _ExactPath(path)
    fx = tuple(Fraction(float(v)) for v in as_point(x))
    slope = Fraction(spec.slope)
    path_t, path_tau = ep.value(t), ep.value(tau)
    x_restart = tuple(a + b - c for a, b, c in zip(fx, path_tau, path_t))
    r_restart = Fraction(spec.radius) - slope * (Fraction(tau) - Fraction(t))
    c = tuple(a - b for a, b in zip(x_restart, path_tau))
    K = r_restart + slope * Fraction(tau)
    restarted, _ = _first_crossing(ep, tau, c, K, slope, spec.horizon)
    return restarted == original.time


def hitting_sequence(path: SampledPath, epsilon: float, L1: float, T: Optional[float] = None,
                     until: Optional[float] = None) -> Partition:
    """
    递归命中序列 H_0 = t_start, H_{n+1} = H^{H_n, 0, ε}，直到 H_N = T

    :param path: 覆盖 [t_start, T] 的路径
    :param epsilon: 锥半径 ε
    :param L1: 锥斜率
    :param T: 终端时间，默认取路径 t_end
    :param until: 只保留不晚于 until 的命中（用于 u^ε 的求值）
    :return: 全部 H_i < T 的划分点；到达 T 时 terminal=True 并记录终端增量
    """
    if not epsilon > 0:
        raise ConfigurationError(f"ε 必须为正: {epsilon}")
    T = path.t_end if T is None else float(T)
    _check_cover(path, path.t_start, T)
    ep = _ExactPath(path)
    slope = Fraction(L1)
    feps = Fraction(epsilon)
    current = path.t_start
    points: List[PartitionPoint] = []
    terminal_point = None
    terminal = False
    while True:
        base = ep.value(current)
        c = tuple(-b for b in base)
        K = feps + slope * Fraction(current)
        nxt, lateral = _first_crossing(ep, current, c, K, slope, T)
        if until is not None and nxt > until:
            break
        increment = path.value_at(nxt) - path.value_at(current)
        if not lateral:
            terminal = True
            terminal_point = PartitionPoint(nxt, increment)
            break
        points.append(PartitionPoint(nxt, increment))
        current = nxt
    logger.debug(f"命中序列: ε={epsilon}, L1={L1}, 命中次数={len(points)}, terminal={terminal}")
    return Partition(points=tuple(points), epsilon=epsilon, dim=path.dim,
                     terminal=terminal, terminal_point=terminal_point)


def cone_classify(spec: ConeSpec, s: float, x: Point, tolerance: float = 0.0) -> str:
    """
    锥域分类：interior / lateral_boundary / terminal_boundary / outside

    锥顶 (t0, 0) 视为内部；s = T 且在闭锥内时判为终端边界。
    """
    if s < spec.t0:
        raise PreconditionError(f"s={s} 早于锥顶 t0={spec.t0}")
    x = as_point(x)
    norm = float(np.linalg.norm(x))
    r = norm + spec.slope * (s - spec.t0)
    if s > spec.horizon:
        return OUTSIDE
    if s == spec.t0 and norm == 0.0:
        return INTERIOR
    if s == spec.horizon and r <= spec.radius + tolerance:
        return TERMINAL
    if abs(r - spec.radius) <= tolerance:
        return LATERAL
    if r < spec.radius:
        return INTERIOR
    return OUTSIDE


def partition_state(path: SampledPath, t: float, epsilon: float, L1: float) -> Tuple[Partition, np.ndarray]:
    """
    路径在 t 时刻的伪马氏状态 (π_n, x̄)

    π_n 为 H_n ≤ t 的全部侧面命中（恰在 t 命中时 x̄ = 0），x̄ = ω_t − ω_{H_n}。
    t = t_end 时终端出口不计入 π_n。
    """
    if not path.covers(path.t_start, t):
        raise DomainError(f"路径定义域 [{path.t_start}, {path.t_end}] 未覆盖 t={t}")
    if t <= path.t_start:
        return Partition(epsilon=epsilon, dim=path.dim), np.zeros(path.dim)
    full = hitting_sequence(path, epsilon, L1, T=path.t_end, until=t)
    pi = Partition(points=full.points, epsilon=epsilon, dim=path.dim)
    return pi, path.value_at(t) - path.value_at(pi.last_time(path.t_start))


def hitting_variants(path: SampledPath, t: float, epsilon: float,
                     T: Optional[float] = None) -> Tuple[float, float]:
    """
    比较用变体命中时间

    Ĥ_ε = inf{s ≥ t : |ω_s − ω_t| ≥ ε} ∧ (t + ε) ∧ T
    H*_ε = inf{s ≥ t : (s − t) + sup_{t≤r≤s} |ω_r − ω_t| ≥ ε} ∧ T
    """
    T = path.t_end if T is None else float(T)
    _check_cover(path, t, T)
    ep = _ExactPath(path)
    base = ep.value(t)
    c = tuple(-b for b in base)
    feps = Fraction(epsilon)
    ball_exit, _ = _first_crossing(ep, t, c, feps, Fraction(0), T)
    h_hat = min(ball_exit, t + epsilon, T)

    # H*：逐段维护运行最大值，段内要么 |ω−ω_t| + (s−t) 先越界，要么时钟项先越界
    slope = Fraction(1)
    K = feps + Fraction(t)
    running_max = 0.0
    lo = t
    h_star = T
    while lo < T:
        clock = t + epsilon - running_max
        if clock <= lo:
            h_star = lo
            break
        alpha, beta, seg_end = ep.segment(lo)
        hi = min(seg_end, T)
        gamma = tuple(ci + ai for ci, ai in zip(c, alpha))
        candidates = []
        if clock <= hi:
            candidates.append(clock)
        pred = (lambda s, g=gamma, b=beta: _crossed(s, g, b, K, slope))
        if pred(lo):
            candidates.append(lo)
        elif pred(hi):
            guess = _quadratic_guess(gamma, beta, K, slope, lo, hi)
            candidates.append(_smallest_crossing(pred, lo, hi, guess))
        if candidates:
            h_star = min(min(candidates), T)
            break
        running_max = max(running_max, float(np.linalg.norm(path.value_at(hi) - path.value_at(t))))
        lo = hi
    return h_hat, h_star


# ----------------------------------------------------------------------
# 批量命中（统一网格，浮点向量化）
# ----------------------------------------------------------------------
def segment_crossing(gamma: np.ndarray, beta: np.ndarray, k0: np.ndarray, slope: float,
                     u_lo: np.ndarray, u_hi: np.ndarray) -> np.ndarray:
    """
    向量化线段交叉：求 u ∈ [u_lo, u_hi] 使 |γ + β u| = k0 − slope·u

    gamma, beta: (n, d)；k0, u_lo, u_hi: (n,)。取非伪根中的较大者并截断到区间内。
    """
    a = np.einsum("ij,ij->i", beta, beta) - slope * slope
    b = 2.0 * (np.einsum("ij,ij->i", gamma, beta) + slope * k0)
    c = np.einsum("ij,ij->i", gamma, gamma) - k0 * k0
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = -0.5 * (b + np.copysign(disc, b))
        r1 = np.where(a != 0.0, q / a, np.nan)
        r2 = np.where(q != 0.0, c / q, np.nan)
        linear = np.where(b != 0.0, -c / b, np.nan)
    r1 = np.where(a == 0.0, linear, r1)
    r2 = np.where(a == 0.0, linear, r2)
    tol = 1e-12 * np.maximum(1.0, np.abs(k0))
    ok1 = np.isfinite(r1) & (k0 - slope * r1 >= -tol)
    ok2 = np.isfinite(r2) & (k0 - slope * r2 >= -tol)
    root = np.where(ok1 & ok2, np.maximum(r1, r2), np.where(ok1, r1, np.where(ok2, r2, u_hi)))
    return np.clip(root, u_lo, u_hi)


@dataclass(frozen=True, eq=False)
class BatchSequence:
    """
    批量命中序列

    knot_times:  (n, M) 命中时间，第 0 列为起点，未用到的尾部以 T 填充
    knot_values: (n, M, d) 命中时刻的路径取值 W(H_k)（未偏移）
    counts:      (n,) 侧面命中次数（不含终端）
    """
    knot_times: np.ndarray
    knot_values: np.ndarray
    counts: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.knot_times.shape[0])


def values_at(grid: np.ndarray, paths: np.ndarray, s: np.ndarray) -> np.ndarray:
    """每条样本路径在各自时刻 s 处的线性插值"""
    n, k1, _ = paths.shape
    idx = np.clip(np.searchsorted(grid, s, side="right") - 1, 0, k1 - 2)
    t0 = grid[idx]
    w = ((s - t0) / (grid[idx + 1] - t0))[:, None]
    rows = np.arange(n)
    return paths[rows, idx] + w * (paths[rows, idx + 1] - paths[rows, idx])


def batch_first_crossing(grid: np.ndarray, paths: np.ndarray, start: np.ndarray, c: np.ndarray,
                         K: np.ndarray, slope: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    批量首次交叉 |c + W_s| + slope·s ≥ K（s > start），网格终点视为终端

    :param grid: (k+1,) 统一时间网格，末端为 T
    :param paths: (n, k+1, d) 网格上的路径
    :param start: (n,) 各样本起始时间
    :param c: (n, d) 偏移
    :param K: (n,) 绝对时间形式的半径
    :return: (命中时间 (n,), 是否侧面命中 (n,))
    """
    n = paths.shape[0]
    h = K[:, None] - slope * grid[None, :]
    g = c[:, None, :] + paths
    norm2 = np.einsum("ijk,ijk->ij", g, g)
    crossed = (h <= 0.0) | (norm2 >= h * h)
    crossed &= grid[None, :] > start[:, None]
    any_cross = crossed.any(axis=1)
    j = np.where(any_cross, crossed.argmax(axis=1), grid.shape[0] - 1)
    j = np.maximum(j, 1)
    rows = np.arange(n)
    t_prev = grid[j - 1]
    step = grid[j] - t_prev
    lo_time = np.maximum(start, t_prev)
    beta = (paths[rows, j] - paths[rows, j - 1]) / step[:, None]
    gamma = c + paths[rows, j - 1]
    k0 = K - slope * t_prev
    u = segment_crossing(gamma, beta, k0, slope, lo_time - t_prev, step)
    hit = np.where(any_cross, t_prev + u, grid[-1])
    return hit, any_cross


def batch_hitting_sequence(grid: np.ndarray, paths: np.ndarray, epsilon: float, slope: float,
                           x0: Optional[np.ndarray] = None, K0=None,
                           max_levels: int = 10_000) -> BatchSequence:
    """
    统一网格上的批量命中序列

    第一个锥以偏移 x0、绝对半径 K0 给出（|x0 + W_s| + slope·s ≥ K0），
    之后每个锥以上一次命中点为中心、半径 ε。W 在网格起点取 0。

    :param grid: (k+1,) 时间网格 [t, T]
    :param paths: (n, k+1, d) 路径
    :param epsilon: 后续锥半径
    :param slope: 锥斜率 L1
    :param x0: 第一个锥的偏移，默认 0
    :param K0: 第一个锥的绝对半径（标量或 (n,)），默认 ε + slope·t
    """
    n, _, d = paths.shape
    t = float(grid[0])
    T = float(grid[-1])
    c = np.zeros((n, d)) if x0 is None else np.broadcast_to(np.asarray(x0, dtype=float), (n, d)).copy()
    K = np.full(n, epsilon + slope * t) if K0 is None else np.broadcast_to(np.asarray(K0, dtype=float), (n,)).copy()
    current = np.full(n, t)
    active = np.ones(n, dtype=bool)
    times = [current.copy()]
    values = [paths[:, 0, :].copy()]
    counts = np.zeros(n, dtype=int)
    for _ in range(max_levels):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        hit, lateral = batch_first_crossing(grid, paths[idx], current[idx], c[idx], K[idx], slope)
        lateral &= hit < T
        new_times = np.full(n, T)
        new_times[idx] = np.where(lateral, hit, T)
        new_values = paths[:, -1, :].copy()
        if idx.size:
            new_values[idx] = values_at(grid, paths[idx], new_times[idx])
        finished = np.zeros(n, dtype=bool)
        finished[idx] = ~lateral
        counts[idx] += lateral.astype(int)
        times.append(new_times)
        values.append(new_values)
        current = new_times
        c = -new_values
        K = epsilon + slope * new_times
        active &= ~finished
    else:
        raise RuntimeError(f"批量命中序列超过 {max_levels} 层仍未终止")
    return BatchSequence(knot_times=np.stack(times, axis=1), knot_values=np.stack(values, axis=1), counts=counts)


def interpolate_knots(grid: np.ndarray, knot_times: np.ndarray, knot_values: np.ndarray) -> np.ndarray:
    """
    把每个样本的节点折线重采样到公共网格

    :param knot_times: (n, M) 非降时间（尾部可重复 T）
    :param knot_values: (n, M, d)
    :return: (n, len(grid), d)
    """
    n, _, d = knot_values.shape
    out = np.empty((n, grid.shape[0], d))
    for i in range(n):
        kt = knot_times[i]
        # 尾部重复节点对插值无影响，只保留严格递增部分
        keep = np.concatenate([[True], np.diff(kt) > 0])
        for j in range(d):
            out[i, :, j] = np.interp(grid, kt[keep], knot_values[i, keep, j])
    return out


def frozen_values(grid: np.ndarray, knot_times: np.ndarray, knot_values: np.ndarray) -> np.ndarray:
    """
    冻结取值：网格时刻 r 处取最后一个不晚于 r 的命中点的取值 X̂_{H_m(r)}

    :return: (n, len(grid), d)
    """
    n, M, d = knot_values.shape
    idx = np.empty((n, grid.shape[0]), dtype=int)
    for i in range(n):
        idx[i] = np.searchsorted(knot_times[i], grid, side="right") - 1
    idx = np.clip(idx, 0, M - 1)
    rows = np.arange(n)[:, None]
    return knot_values[rows, idx]
