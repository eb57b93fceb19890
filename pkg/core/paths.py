"""
路径模型

规范空间 Ω 的离散模型：分段线性连续路径、停止路径、范数与度量、
路径拼接以及划分插值。所有对象构造后不可变，可在并发 worker 间共享。

约定：
1. 节点时间严格递增，时间相等一律用精确比较
2. t_end 之后按常数延拓，即停止路径 ω_{·∧t}
3. 分段线性路径上的上确界逐段精确计算（线段上 |a+bu| 为凸函数，最大值在端点）
"""

import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import AnchorError, DimensionError, DomainError, OrderingError
from utils.logger import get_logger

logger = get_logger(name="core.paths")

Point = Union[float, Sequence[float], np.ndarray]


def as_point(x: Point, dim: Optional[int] = None) -> np.ndarray:
    """把标量或序列转为一维 float 数组"""
    arr = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"点的维度为 {arr.shape[0]}，期望 {dim}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SampledPath:
    """
    分段线性连续路径

    times:  节点时间，形状 (k,)
    values: 节点取值，形状 (k, d)
    t_end:  定义区间右端点，最后一个节点之后常数延拓
    """
    times: np.ndarray
    values: np.ndarray
    t_end: float

    def __post_init__(self):
        times = _frozen(np.asarray(self.times, dtype=float).reshape(-1))
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        values = _frozen(values)
        if times.shape[0] == 0:
            raise DomainError("路径至少需要一个节点")
        if values.shape[0] != times.shape[0]:
            raise DimensionError(f"节点数不一致: times={times.shape[0]}, values={values.shape[0]}")
        if times.shape[0] > 1 and not np.all(np.diff(times) > 0):
            raise OrderingError("路径节点时间必须严格递增")
        t_end = float(self.t_end)
        if t_end < times[-1]:
            raise DomainError(f"t_end={t_end} 早于最后一个节点 {times[-1]}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "t_end", t_end)

    # ------------------------------------------------------------------
    # 构造
    # ------------------------------------------------------------------
    @classmethod
    def from_knots(cls, knots: Iterable[Tuple[float, Point]], t_end: Optional[float] = None) -> "SampledPath":
        knots = list(knots)
        times = [float(t) for t, _ in knots]
        values = np.array([as_point(x) for _, x in knots])
        return cls(times=np.array(times), values=values, t_end=times[-1] if t_end is None else t_end)

    @classmethod
    def zero(cls, t_start: float, t_end: float, dim: int = 1) -> "SampledPath":
        if t_end > t_start:
            return cls(times=np.array([t_start, t_end]), values=np.zeros((2, dim)), t_end=t_end)
        return cls(times=np.array([t_start]), values=np.zeros((1, dim)), t_end=t_end)

    # ------------------------------------------------------------------
    # 基本属性
    # ------------------------------------------------------------------
    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def anchor(self) -> np.ndarray:
        return self.values[0]

    def is_anchored(self, origin: Optional[Point] = None) -> bool:
        origin = np.zeros(self.dim) if origin is None else as_point(origin, self.dim)
        return bool(np.array_equal(self.values[0], origin))

    def covers(self, a: float, b: float) -> bool:
        return self.t_start <= a and b <= self.t_end

    def _check_time(self, t: float):
        if t < self.t_start or t > self.t_end:
            raise DomainError(f"时间 {t} 超出路径定义域 [{self.t_start}, {self.t_end}]")

    # ------------------------------------------------------------------
    # 取值
    # ------------------------------------------------------------------
    def value_at(self, t: float) -> np.ndarray:
        """线性插值取值，t_end 之后常数延拓"""
        if t < self.t_start:
            raise DomainError(f"时间 {t} 早于路径起点 {self.t_start}")
        times = self.times
        if t >= times[-1]:
            return self.values[-1].copy()
        k = int(np.searchsorted(times, t, side="right")) - 1
        t0, t1 = times[k], times[k + 1]
        if t == t0:
            return self.values[k].copy()
        w = (t - t0) / (t1 - t0)
        return self.values[k] + w * (self.values[k + 1] - self.values[k])

    def sample(self, grid: np.ndarray) -> np.ndarray:
        """在时间网格上取值，返回 (len(grid), d)"""
        grid = np.asarray(grid, dtype=float)
        if grid.size and grid[0] < self.t_start:
            raise DomainError(f"网格起点 {grid[0]} 早于路径起点 {self.t_start}")
        out = np.empty((grid.shape[0], self.dim))
        for j in range(self.dim):
            out[:, j] = np.interp(grid, self.times, self.values[:, j])
        return out

    def truncate(self, t: float) -> "SampledPath":
        """截断到 t：保留 t 之前的节点并在 t 处补节点，t_end 置为 t"""
        self._check_time(t)
        mask = self.times < t
        times = np.append(self.times[mask], t)
        values = np.vstack([self.values[mask], self.value_at(t)])
        return SampledPath(times=times, values=values, t_end=t)

    def reanchor(self, t: float) -> "SampledPath":
        """B^t：以 t 为起点、在 t 处取 0 的平移路径"""
        self._check_time(t)
        base = self.value_at(t)
        mask = self.times > t
        times = np.concatenate([[t], self.times[mask]])
        values = np.vstack([np.zeros(self.dim), self.values[mask] - base])
        return SampledPath(times=times, values=values, t_end=self.t_end)

    # ------------------------------------------------------------------
    # 序列化
    # ------------------------------------------------------------------
    def to_frame(self) -> pd.DataFrame:
        """
        CSV 表示：列 t, x_1..x_d

        若最后节点早于 t_end，则在 t_end 处补一个常数节点，使 CSV 自带定义域右端点。
        """
        times, values = self.times, self.values
        if times[-1] < self.t_end:
            times = np.append(times, self.t_end)
            values = np.vstack([values, values[-1]])
        data = {"t": times}
        for j in range(self.dim):
            data[f"x_{j + 1}"] = values[:, j]
        return pd.DataFrame(data)

    def to_csv(self, path_or_buf=None) -> Optional[str]:
        frame = self.to_frame()
        return frame.to_csv(path_or_buf, index=False, float_format=lambda v: repr(float(v)))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "SampledPath":
        columns = [c for c in frame.columns if c != "t"]
        columns.sort(key=lambda c: int(c.split("_")[1]))
        times = frame["t"].to_numpy(dtype=float)
        values = frame[columns].to_numpy(dtype=float)
        return cls(times=times, values=values, t_end=float(times[-1]))

    @classmethod
    def from_csv(cls, path_or_buf) -> "SampledPath":
        if isinstance(path_or_buf, str) and "\n" in path_or_buf:
            path_or_buf = io.StringIO(path_or_buf)
        frame = pd.read_csv(path_or_buf, float_precision="round_trip")
        return cls.from_frame(frame)

    def to_json_dict(self) -> dict:
        return {
            "t_start": self.t_start,
            "t_end": self.t_end,
            "dim": self.dim,
            "knots": [[float(t), [float(v) for v in x]] for t, x in zip(self.times, self.values)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json_dict(cls, data: dict) -> "SampledPath":
        knots = data["knots"]
        times = np.array([k[0] for k in knots], dtype=float)
        values = np.array([k[1] for k in knots], dtype=float).reshape(len(knots), int(data["dim"]))
        return cls(times=times, values=values, t_end=float(data["t_end"]))

    @classmethod
    def from_json(cls, text: str) -> "SampledPath":
        return cls.from_json_dict(json.loads(text))

    def same_as(self, other: "SampledPath") -> bool:
        """节点与定义域逐位相同"""
        return (
            self.t_end == other.t_end
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class PathPoint:
    """(t, ω) ∈ Λ，omega 为截断到 t 的路径"""
    t: float
    omega: SampledPath

    def __post_init__(self):
        t = float(self.t)
        if t < self.omega.t_start or t > self.omega.t_end:
            raise DomainError(f"时间 {t} 超出路径定义域 [{self.omega.t_start}, {self.omega.t_end}]")
        object.__setattr__(self, "t", t)
        if self.omega.t_end != t:
            object.__setattr__(self, "omega", self.omega.truncate(t))

    @property
    def dim(self) -> int:
        return self.omega.dim


@dataclass(frozen=True, eq=False)
class PartitionPoint:
    """划分点 (H_i, x_i)：命中时间与该段增量"""
    time: float
    increment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "increment", _frozen(as_point(self.increment)))


@dataclass(frozen=True, eq=False)
class Partition:
    """
    伪马氏状态 π_n = ((H_1, x_1), ..., (H_n, x_n))

    points:   按时间严格递增的划分点
    epsilon:  生成该划分使用的 ε
    dim:      空间维度（空划分也需要）
    terminal: 序列是否已到达终端 H_N = T
    """
    points: Tuple[PartitionPoint, ...] = ()
    epsilon: Optional[float] = None
    dim: int = 1
    terminal: bool = False
    terminal_point: Optional[PartitionPoint] = field(default=None)

    def __post_init__(self):
        points = tuple(self.points)
        object.__setattr__(self, "points", points)
        times = [p.time for p in points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise OrderingError(f"划分时间必须严格递增: {times}")
        for p in points:
            if p.increment.shape[0] != self.dim:
                raise DimensionError(f"划分增量维度 {p.increment.shape[0]} 与 dim={self.dim} 不符")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, Point]], epsilon: Optional[float] = None,
                   dim: Optional[int] = None) -> "Partition":
        pts = tuple(PartitionPoint(t, as_point(x)) for t, x in pairs)
        if dim is None:
            dim = pts[0].increment.shape[0] if pts else 1
        return cls(points=pts, epsilon=epsilon, dim=dim)

    @property
    def times(self) -> np.ndarray:
        return np.array([p.time for p in self.points], dtype=float)

    @property
    def increments(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, self.dim))
        return np.vstack([p.increment for p in self.points])

    @property
    def position(self) -> np.ndarray:
        """Σ x_j：冻结插值路径在最后划分时刻的取值"""
        return self.increments.sum(axis=0) if self.points else np.zeros(self.dim)

    def last_time(self, t0: float = 0.0) -> float:
        return self.points[-1].time if self.points else float(t0)

    def extend(self, time: float, increment: Point) -> "Partition":
        """π_n ⊕ (t, x)"""
        point = PartitionPoint(time, as_point(increment, self.dim))
        return Partition(points=self.points + (point,), epsilon=self.epsilon, dim=self.dim)

    def prefix(self, n: int) -> "Partition":
        return Partition(points=self.points[:n], epsilon=self.epsilon, dim=self.dim)

    def key(self, quantum: float) -> Tuple:
        """按量子 q 取整后的缓存键"""
        return tuple(
            (int(round(p.time / quantum)),) + tuple(int(round(v / quantum)) for v in p.increment)
            for p in self.points
        )


def sup_norm(path: SampledPath, t: float) -> float:
    """
    ‖ω‖_t = sup_{t_start≤s≤t} |ω_s|

    线段上范数为凸函数，最大值必在端点取到，因此只需比较节点与 t 处的取值。
    """
    path._check_time(t)
    mask = path.times <= t
    values = np.vstack([path.values[mask], path.value_at(t)])
    return float(np.max(np.linalg.norm(values, axis=1)))


def d_infinity(a: PathPoint, b: PathPoint) -> float:
    """
    d_∞((t, ω), (t', ω')) = |t−t'|^{1/2} + sup_s |ω_{s∧t} − ω'_{s∧t'}|

    两条停止路径之差仍为分段线性，在合并节点集上逐段精确求上确界。
    """
    if a.dim != b.dim:
        raise DimensionError(f"维度不一致: {a.dim} vs {b.dim}")
    start = max(a.omega.t_start, b.omega.t_start)
    stop = max(a.t, b.t)
    grid = np.union1d(np.union1d(a.omega.times, b.omega.times), [start, a.t, b.t])
    grid = grid[(grid >= start) & (grid <= stop)]
    diff = a.omega.sample(np.minimum(grid, a.t)) - b.omega.sample(np.minimum(grid, b.t))
    sup = float(np.max(np.linalg.norm(diff, axis=1))) if grid.size else 0.0
    return float(np.sqrt(abs(a.t - b.t))) + sup


def concatenate(prefix: SampledPath, t: float, suffix: SampledPath) -> SampledPath:
    """
    拼接 ω ⊗_t ω'：[t_start, t) 上等于 prefix，[t, T] 上等于 prefix(t) + suffix
    """
    if prefix.dim != suffix.dim:
        raise DimensionError(f"维度不一致: prefix={prefix.dim}, suffix={suffix.dim}")
    if t < prefix.t_start or t > prefix.t_end:
        raise DomainError(f"prefix 未覆盖拼接时刻 t={t}")
    if suffix.t_start != t or not suffix.is_anchored():
        raise AnchorError(f"suffix 必须在 t={t} 处锚定于原点 (起点 {suffix.t_start}, 取值 {suffix.anchor})")
    base = prefix.value_at(t)
    mask_p = prefix.times < t
    mask_s = suffix.times > t
    times = np.concatenate([prefix.times[mask_p], [t], suffix.times[mask_s]])
    values = np.vstack([prefix.values[mask_p], base, suffix.values[mask_s] + base])
    return SampledPath(times=times, values=values, t_end=suffix.t_end)


def interpolate_partition(pi: Partition, t0: float, T: float) -> SampledPath:
    """
    划分插值 ω^{π_n}

    经过 (t0, 0)、(t_i, Σ_{j≤i} x_j)，之后取值不变直到 T。
    """
    times = pi.times
    if times.size and (times[0] <= t0 or np.any(np.diff(times) <= 0) or times[-1] > T):
        raise OrderingError(f"划分时间必须在 ({t0}, {T}] 内严格递增: {times.tolist()}")
    cumulative = np.cumsum(pi.increments, axis=0)
    knot_times = np.concatenate([[t0], times])
    knot_values = np.vstack([np.zeros(pi.dim), cumulative]) if times.size else np.zeros((1, pi.dim))
    if knot_times[-1] < T:
        knot_times = np.append(knot_times, T)
        knot_values = np.vstack([knot_values, knot_values[-1]])
    return SampledPath(times=knot_times, values=knot_values, t_end=T)
