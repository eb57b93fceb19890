"""
锥域上路径冻结 PDE 的单调显式差分求解器

∂_t v + g(s, x, v, Dv, D²v) = 0，(s, x) ∈ Q；v = h 在 ∂Q 上

格式：
    v(s_k) = v(s_{k+1}) + Δt·ĝ
    ĝ = g(s, x, v, 中心差分 Dv, 中心差分 D²v) + (L_z/2)·Σ_i (D⁺_i v − D⁻_i v)
Lax–Friedrichs 耗散项保证 z 方向的单调性；CFL 条件
    Δt·(2·L_Γ·d/Δx² + L_z·d/Δx + L_y) ≤ 1
下格式单调。不对扩散做非退化假设。

格点为轴对齐的方盒格点，锥外的节点取边界数据在锥面上的径向投影值。
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from core.hitting import ConeSpec, batch_first_crossing, values_at
from solvers.generators import Generator, UpperBoundingGenerator, LowerBoundingGenerator
from solvers.nonlinear_expectation import (
    ControlFamily, ControlLaw, MCEstimate, MeasureFamilySpec, chunk_normals, constant_family, euler_paths,
    sample_mean,
)
from utils.errors import ConfigurationError, DivergenceError, PreconditionError
from utils.logger import get_logger
from utils.parallel import WorkerPool, serial_pool

logger = get_logger(name="solvers.cone_pde")

# (s, x (N, d)) -> (N,)；s 可以是标量，也可以是与 x 行数相同的数组
BoundaryData = Callable[[float, np.ndarray], np.ndarray]

MAX_DIM = 3


def eval_boundary(boundary: BoundaryData, s, x: np.ndarray) -> np.ndarray:
    """边界数据求值，标量结果广播到 (N,)"""
    out = np.asarray(boundary(s, x), dtype=float)
    return np.broadcast_to(out, (x.shape[0],)).copy()


# ----------------------------------------------------------------------
# 区域
# ----------------------------------------------------------------------
class Domain(ABC):
    """时空区域：半径随时间变化的球截面"""
    t0: float
    horizon: float

    @abstractmethod
    def radius(self, s: float) -> float:
        pass

    @property
    @abstractmethod
    def top_time(self) -> float:
        pass

    @property
    @abstractmethod
    def base_radius(self) -> float:
        pass

    def project(self, s: float, x: np.ndarray) -> np.ndarray:
        """把闭区域外的点径向投影到截面边界上"""
        r = max(self.radius(s), 0.0)
        norm = np.linalg.norm(x, axis=1)
        scale = np.where(norm > r, np.divide(r, norm, out=np.zeros_like(norm), where=norm > 0), 1.0)
        return x * scale[:, None]

    def interior_mask(self, s: float, x: np.ndarray) -> np.ndarray:
        if s >= self.top_time:
            return np.zeros(x.shape[0], dtype=bool)
        return np.linalg.norm(x, axis=1) < self.radius(s)


class ConeDomain(Domain):
    """锥 |x| + L1(s − t0) < R，s < T"""

    def __init__(self, spec: ConeSpec):
        self.spec = spec
        self.t0 = spec.t0
        self.horizon = spec.horizon

    def radius(self, s: float) -> float:
        return self.spec.radius_at(s)

    @property
    def top_time(self) -> float:
        return self.spec.top_time

    @property
    def base_radius(self) -> float:
        return self.spec.radius


class CylinderDomain(Domain):
    """柱 |x| < R，t0 ≤ s < T"""

    def __init__(self, t0: float, radius: float, horizon: float):
        if not radius > 0 or not horizon > t0:
            raise ConfigurationError(f"柱域参数非法: t0={t0}, R={radius}, T={horizon}")
        self.t0 = t0
        self._radius = radius
        self.horizon = horizon

    def radius(self, s: float) -> float:
        return self._radius

    @property
    def top_time(self) -> float:
        return self.horizon

    @property
    def base_radius(self) -> float:
        return self._radius


# ----------------------------------------------------------------------
# 网格
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class ConeGrid:
    """
    方盒格点与时间层

    domain: 锥或柱
    dx:     空间步长
    dt:     最大时间步长（实际步长取整除后 ≤ dt，使末层恰好落在顶部时间）
    dim:    空间维度
    """
    domain: Domain
    dx: float
    dt: float
    dim: int = 1

    def __post_init__(self):
        if not self.dx > 0 or not self.dt > 0:
            raise ConfigurationError(f"步长必须为正: dx={self.dx}, dt={self.dt}")
        if not 1 <= self.dim <= MAX_DIM:
            raise ConfigurationError(f"网格维度必须在 1..{MAX_DIM}: {self.dim}")
        interior_per_axis = 2 * int(math.ceil(self.domain.base_radius / self.dx)) - 1
        if interior_per_axis < 3:
            raise ConfigurationError(
                f"锥底每个轴上的内部节点不足 3 个: R={self.domain.base_radius}, dx={self.dx}")

    @classmethod
    def for_cone(cls, spec: ConeSpec, dx: float, dt: float, dim: int = 1) -> "ConeGrid":
        return cls(domain=ConeDomain(spec), dx=dx, dt=dt, dim=dim)

    @property
    def half_width(self) -> int:
        return int(math.ceil(self.domain.base_radius / self.dx)) + 1

    @property
    def axis(self) -> np.ndarray:
        m = self.half_width
        return np.arange(-m, m + 1) * self.dx

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.axis.shape[0],) * self.dim

    @property
    def n_steps(self) -> int:
        span = self.domain.top_time - self.domain.t0
        return max(1, int(math.ceil(span / self.dt - 1e-9)))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.domain.t0, self.domain.top_time, self.n_steps + 1)

    @property
    def step(self) -> float:
        return (self.domain.top_time - self.domain.t0) / self.n_steps

    def nodes(self) -> np.ndarray:
        """(N, d) 全部格点坐标，按 C 顺序展开"""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def cfl_number(self, generator: Generator) -> float:
        d = self.dim
        return self.step * (2.0 * generator.gamma_lipschitz * d / self.dx ** 2
                            + generator.z_lipschitz * d / self.dx + generator.y_lipschitz)

    @staticmethod
    def max_stable_step(generator: Generator, dx: float, dim: int = 1) -> float:
        rate = 2.0 * generator.gamma_lipschitz * dim / dx ** 2 + generator.z_lipschitz * dim / dx + generator.y_lipschitz
        return math.inf if rate == 0 else 1.0 / rate


# ----------------------------------------------------------------------
# 解场
# ----------------------------------------------------------------------
class ValueField:
    """
    网格解：各时间层的节点值，多线性插值求值

    区域外（含边界）的点返回边界数据，区域内部按网格插值。
    """

    def __init__(self, grid: ConeGrid, values: np.ndarray, boundary: BoundaryData):
        self.grid = grid
        self.values = values
        self.boundary = boundary
        self.times = grid.times
        self._interpolator = RegularGridInterpolator(
            (self.times,) + (grid.axis,) * grid.dim, values, method="linear", bounds_error=False, fill_value=None)

    @property
    def domain(self) -> Domain:
        return self.grid.domain

    @property
    def apex_value(self) -> float:
        """锥顶 (t0, 0) 处的值"""
        center = (self.grid.half_width,) * self.grid.dim
        return float(self.values[(0,) + center])

    def interpolate(self, s: float, x) -> float:
        """不区分内外的网格插值"""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(self._interpolator(np.concatenate([[s], x])[None, :])[0])

    def evaluate(self, s: float, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
        if s < self.domain.t0 or s > self.domain.horizon:
            raise PreconditionError(f"s={s} 超出区域时间范围 [{self.domain.t0}, {self.domain.horizon}]")
        if s >= self.domain.top_time or not self.domain.interior_mask(s, x)[0]:
            return float(eval_boundary(self.boundary, s, self.domain.project(s, x))[0])
        return self.interpolate(s, x[0])

    def slice_values(self, k: int) -> np.ndarray:
        return self.values[k]

    def boundary_gap(self, k: int) -> float:
        """
        第 k 层上紧邻边界的内部节点与其投影边界值的最大差

        用于展示柱域上边界层的跳跃。
        """
        s = self.times[k]
        nodes = self.grid.nodes()
        inside = self.domain.interior_mask(s, nodes)
        if not inside.any():
            return 0.0
        flat = self.values[k].reshape(-1)
        norms = np.linalg.norm(nodes, axis=1)
        near = inside & (norms >= self.domain.radius(s) - self.grid.dx - 1e-12)
        if not near.any():
            return 0.0
        # 沿径向推到截面边界上取边界值
        targets = nodes[near] * (self.domain.radius(s) / np.maximum(norms[near], 1e-300))[:, None]
        edge = eval_boundary(self.boundary, s, targets)
        return float(np.max(np.abs(flat[near] - edge)))

    def to_frame(self) -> pd.DataFrame:
        """闭区域内的节点值：列 s, x_1..x_d, v"""
        nodes = self.grid.nodes()
        rows = []
        for k, s in enumerate(self.times):
            mask = np.linalg.norm(nodes, axis=1) <= max(self.domain.radius(s), 0.0)
            flat = self.values[k].reshape(-1)
            block = {"s": np.full(int(mask.sum()), s)}
            for j in range(self.grid.dim):
                block[f"x_{j + 1}"] = nodes[mask, j]
            block["v"] = flat[mask]
            rows.append(pd.DataFrame(block))
        return pd.concat(rows, ignore_index=True)


# ----------------------------------------------------------------------
# 差分算子
# ----------------------------------------------------------------------
def _derivatives(v: np.ndarray, dx: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    中心一阶差分、二阶差分矩阵与 Σ(D⁺ − D⁻)

    :param v: 形状 (n,)*d 的节点值
    :return: grad (N, d), hess (N, d, d), dissipation (N,)
    """
    d = v.ndim
    padded = np.pad(v, 1, mode="edge")
    center = tuple(slice(1, -1) for _ in range(d))

    def shifted(offsets):
        return padded[tuple(slice(1 + o, padded.shape[i] - 1 + o) for i, o in enumerate(offsets))]

    N = v.size
    grad = np.empty((N, d))
    hess = np.empty((N, d, d))
    dissipation = np.zeros(N)
    base = padded[center].reshape(-1)
    for i in range(d):
        e = [0] * d
        e[i] = 1
        plus = shifted(e).reshape(-1)
        e[i] = -1
        minus = shifted(e).reshape(-1)
        grad[:, i] = (plus - minus) / (2.0 * dx)
        hess[:, i, i] = (plus - 2.0 * base + minus) / (dx * dx)
        dissipation += (plus - 2.0 * base + minus) / dx
        for j in range(i + 1, d):
            def corner(a, b):
                off = [0] * d
                off[i], off[j] = a, b
                return shifted(off).reshape(-1)
            cross = (corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1)) / (4.0 * dx * dx)
            hess[:, i, j] = cross
            hess[:, j, i] = cross
    return grad, hess, dissipation


def numerical_flux(generator: Generator, grid: ConeGrid, values: np.ndarray, s: float) -> np.ndarray:
    """ĝ 在全部格点上的取值，返回形状 (n,)*d"""
    nodes = grid.nodes()
    grad, hess, dissipation = _derivatives(values, grid.dx)
    flat = values.reshape(-1)
    g = generator.evaluate(s, nodes, flat, grad, hess)
    return (g + 0.5 * generator.z_lipschitz * dissipation).reshape(values.shape)


def explicit_step(generator: Generator, grid: ConeGrid, v_next: np.ndarray, s: float, h: float) -> np.ndarray:
    """一步显式更新 v_next + h·ĝ（不处理边界）"""
    return v_next + h * numerical_flux(generator, grid, v_next, s)


def scheme_residual(generator: Generator, grid: ConeGrid, s: float,
                    test_function: Callable[[np.ndarray], np.ndarray],
                    derivatives: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]) -> float:
    """
    相容性检查：离散算子作用在测试函数样本上，与 g(s, x, φ, Dφ, D²φ) 在内部节点上的最大偏差
    """
    nodes = grid.nodes()
    phi = np.asarray(test_function(nodes), dtype=float)
    discrete = numerical_flux(generator, grid, phi.reshape(grid.shape), s).reshape(-1)
    grad, hess = derivatives(nodes)
    exact = generator.evaluate(s, nodes, phi, grad, hess)
    inside = grid.domain.interior_mask(s, nodes) if s < grid.domain.top_time else \
        np.linalg.norm(nodes, axis=1) < grid.domain.base_radius
    # 只比较模板完整落在格点内的节点
    inner = np.all(np.abs(nodes) < grid.axis[-1] - 0.5 * grid.dx, axis=1) & inside
    if not inner.any():
        return 0.0
    return float(np.max(np.abs(discrete[inner] - exact[inner])))


# ----------------------------------------------------------------------
# 求解
# ----------------------------------------------------------------------
def _boundary_slice(grid: ConeGrid, boundary: BoundaryData, s: float, nodes: np.ndarray) -> np.ndarray:
    return eval_boundary(boundary, s, grid.domain.project(s, nodes))


def solve_domain(generator: Generator, grid: ConeGrid, boundary: BoundaryData) -> ValueField:
    """
    在给定区域上向后推进显式格式

    :param generator: 冻结生成元
    :param grid: 网格
    :param boundary: 边界数据 h(s, x)，x 为 (N, d) 的边界点
    """
    cfl = grid.cfl_number(generator)
    if cfl > 1.0 + 1e-12:
        raise ConfigurationError(
            f"CFL 条件不满足: {cfl:.4f} > 1 (dx={grid.dx}, Δt={grid.step}, 生成元={generator.name})")
    nodes = grid.nodes()
    times = grid.times
    n_steps = times.shape[0] - 1
    values = np.empty((n_steps + 1,) + grid.shape)
    values[n_steps] = _boundary_slice(grid, boundary, times[n_steps], nodes).reshape(grid.shape)
    if not np.all(np.isfinite(values[n_steps])):
        raise DivergenceError("边界数据含非有限值", slice_index=n_steps)
    for k in range(n_steps - 1, -1, -1):
        s = times[k]
        h = times[k + 1] - s
        updated = explicit_step(generator, grid, values[k + 1], times[k + 1], h).reshape(-1)
        inside = grid.domain.interior_mask(s, nodes)
        boundary_values = _boundary_slice(grid, boundary, s, nodes[~inside]) if (~inside).any() else None
        flat = updated
        if boundary_values is not None:
            flat[~inside] = boundary_values
        values[k] = flat.reshape(grid.shape)
        if not np.all(np.isfinite(values[k])):
            raise DivergenceError(f"第 {k} 层出现 NaN/溢出 (s={s})", slice_index=k)
    field = ValueField(grid, values, boundary)
    logger.debug(f"区域求解完成: 层数={n_steps + 1}, 节点={nodes.shape[0]}, 顶点值={field.apex_value}")
    return field


def solve_cone(generator: Generator, grid: ConeGrid, boundary: BoundaryData) -> ValueField:
    """锥域求解，返回包含锥顶值的完整解场"""
    if not isinstance(grid.domain, ConeDomain):
        raise ConfigurationError("solve_cone 需要锥域网格")
    return solve_domain(generator, grid, boundary)


def solve_cylinder(generator: Generator, t0: float, radius: float, horizon: float, dx: float, dt: float,
                   boundary: BoundaryData, dim: int = 1) -> ValueField:
    """柱域求解（边界层不连续的对照实验）"""
    grid = ConeGrid(domain=CylinderDomain(t0, radius, horizon), dx=dx, dt=dt, dim=dim)
    return solve_domain(generator, grid, boundary)


def auto_grid(spec: ConeSpec, generator: Generator, dx: float, dt: Optional[float] = None, dim: int = 1,
              safety: float = 1.0) -> ConeGrid:
    """dt 缺省时取 CFL 允许的最大步长（不超过 dx）"""
    stable = ConeGrid.max_stable_step(generator, dx, dim) * safety
    if dt is None:
        dt = min(stable, dx)
    return ConeGrid.for_cone(spec, dx=dx, dt=dt, dim=dim)


# ----------------------------------------------------------------------
# 概率预言机
# ----------------------------------------------------------------------
def _cone_exit(grid_times: np.ndarray, paths: np.ndarray, spec: ConeSpec) -> Tuple[np.ndarray, np.ndarray]:
    """批量锥出口时间与出口位置（锥顶出发）"""
    n, _, d = paths.shape
    start = np.full(n, spec.t0)
    c = np.zeros((n, d))
    K = np.full(n, spec.radius + spec.slope * spec.t0)
    hit, lateral = batch_first_crossing(grid_times, paths, start, c, K, spec.slope)
    hit = np.where(lateral, hit, grid_times[-1])
    return hit, values_at(grid_times, paths, hit)


def mc_bounding_value(boundary: BoundaryData, spec: ConeSpec, L: float, C0: float, n: int, seed: int,
                      family=None, discounts=None, lower: bool = False, step: Optional[float] = None,
                      pool: Optional[WorkerPool] = None) -> MCEstimate:
    """
    上界方程在锥顶的概率表示

    sup_b sup_P E[e^{∫b} h(H, B_H) + C0 ∫ e^{∫b} ds]，H 为锥出口时间；
    b 取常数折现目录（默认 {−L, 0, L}），P 取控制族（默认常数控制族）。
    lower=True 时为对应的下界表示（inf 与 −C0）。

    :param boundary: 边界数据 h(s, x)
    :param step: Euler 步长，默认锥寿命的 1/200
    """
    pool = pool or serial_pool()
    top = spec.top_time
    step = (top - spec.t0) / 200.0 if step is None else step
    if family is None:
        family = constant_family(L, d=1)
    laws = family.constant_laws() if isinstance(family, ControlFamily) else list(family)
    if not laws:
        raise ConfigurationError("控制族为空")
    mspec = MeasureFamilySpec(L=L, d=laws[0].dim, T=top, t0=spec.t0, step=step)
    discounts = [-L, 0.0, L] if discounts is None else list(discounts)
    if not discounts:
        raise ConfigurationError("折现目录为空")
    grid = mspec.grid
    sign = -1.0 if lower else 1.0
    c0 = sign * C0

    def chunk_values(chunk, law: ControlLaw):
        index, start, end = chunk
        normals = chunk_normals(seed, index, end - start, grid.shape[0] - 1, mspec.d)
        paths = euler_paths(law, grid, normals)
        hit, where = _cone_exit(grid, paths, spec)
        h = eval_boundary(boundary, hit, where)
        tau = hit - spec.t0
        out = []
        for b in discounts:
            weight = np.exp(b * tau)
            running = c0 * (np.expm1(b * tau) / b if b != 0 else tau)
            out.append(weight * h + running)
        return np.stack(out, axis=0)

    best = None
    for law in laws:
        law.check_bounds(L)
        blocks = pool.map_ordered(lambda chunk: chunk_values(chunk, law), pool.chunks(n))
        table = np.concatenate(blocks, axis=1)
        for j, b in enumerate(discounts):
            mean, stderr = sample_mean(table[j])
            if best is None or sign * mean > sign * best[0]:
                best = (mean, stderr, f"{law.name}|b={b:g}")
    logger.debug(f"边界表示估计: {best[2]} -> {best[0]:.6f} ± {best[1]:.2e}")
    return MCEstimate(value=best[0], stderr=best[1], n_samples=n, argmax=best[2])


def solve_bounding_cone(boundary: BoundaryData, spec: ConeSpec, L: float, C0: float, dx: float,
                        dt: Optional[float] = None, lower: bool = False, dim: int = 1) -> ValueField:
    """以 ḡ（或 g̲）为生成元的锥域求解"""
    generator = LowerBoundingGenerator(L, C0) if lower else UpperBoundingGenerator(L, C0)
    grid = auto_grid(spec, generator, dx, dt, dim)
    return solve_cone(generator, grid, boundary)
