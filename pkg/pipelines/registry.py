"""
路径泛函注册表

终端泛函 ξ 以批量形式实现：(times (K+1,), values (n, K+1, d)) -> (n,)。
只依赖终端值的泛函额外提供 terminal_map，供 markovian-features 问题类使用。
YAML 只能按名称选择这里登记的泛函，不执行任何代码。
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from core.paths import SampledPath
from utils.errors import ConfigurationError

BatchFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
TerminalMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class PathFunctional:
    """
    name:         名称
    fn:           批量实现
    terminal_map: ξ(ω) = φ(ω_T) 时的 φ，输入 (n, d)
    bound:        声明的 sup|ξ|（无界时为 inf）
    """
    name: str
    fn: BatchFn
    terminal_map: Optional[TerminalMap] = None
    bound: float = math.inf

    def __call__(self, times: np.ndarray, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(times, values), dtype=float)

    @property
    def terminal_only(self) -> bool:
        return self.terminal_map is not None

    def on_path(self, path: SampledPath) -> float:
        """在单条分段线性路径上求值（以节点为网格，对分段线性路径精确）"""
        times, values = path.times, path.values
        if times[-1] < path.t_end:
            times = np.append(times, path.t_end)
            values = np.vstack([values, values[-1]])
        return float(self(times, values[None, :, :])[0])

    def shifted(self, c: float) -> "PathFunctional":
        """ξ + c"""
        fn, phi = self.fn, self.terminal_map
        return replace(
            self,
            name=f"{self.name}{c:+g}",
            fn=lambda times, values: fn(times, values) + c,
            terminal_map=None if phi is None else (lambda x: phi(x) + c),
            bound=self.bound + abs(c),
        )

    def negated(self) -> "PathFunctional":
        fn, phi = self.fn, self.terminal_map
        return replace(
            self,
            name=f"-{self.name}",
            fn=lambda times, values: -fn(times, values),
            terminal_map=None if phi is None else (lambda x: -phi(x)),
        )


def _terminal(fn_name: str, phi: TerminalMap, bound: float = math.inf) -> PathFunctional:
    return PathFunctional(name=fn_name, fn=lambda times, values: phi(values[:, -1, :]), terminal_map=phi, bound=bound)


def constant(c: float = 0.0) -> PathFunctional:
    return _terminal(f"constant({c:g})", lambda x: np.full(x.shape[0], float(c)), bound=abs(c))


def terminal_value(coord: int = 0) -> PathFunctional:
    """ξ(ω) = ω_T·e_{coord}"""
    return _terminal("terminal", lambda x: x[:, coord].copy())


def terminal_square() -> PathFunctional:
    """ξ(ω) = |ω_T|²"""
    return _terminal("terminal_square", lambda x: np.sum(x * x, axis=1))


def capped_square(cap: float = 4.0) -> PathFunctional:
    """ξ(ω) = min(|ω_T|², cap)，有界版本"""
    return _terminal("capped_square", lambda x: np.minimum(np.sum(x * x, axis=1), cap), bound=cap)


def cosine_terminal(frequency: float = 1.0) -> PathFunctional:
    return _terminal("cosine_terminal", lambda x: np.cos(frequency * x[:, 0]), bound=1.0)


def sine_terminal(frequency: float = 1.0) -> PathFunctional:
    return _terminal("sine_terminal", lambda x: np.sin(frequency * x[:, 0]), bound=1.0)


def digital(level: float = 0.0) -> PathFunctional:
    """ξ(ω) = 1{ω_T ≥ level}，终端处不连续"""
    return _terminal("digital", lambda x: (x[:, 0] >= level).astype(float), bound=1.0)


def running_max(cap: float = math.inf) -> PathFunctional:
    """ξ(ω) = min(sup_s |ω_s|, cap)"""
    def fn(times, values):
        return np.minimum(np.max(np.linalg.norm(values, axis=2), axis=1), cap)
    return PathFunctional(name="running_max", fn=fn, bound=cap)


def time_average(coord: int = 0) -> PathFunctional:
    """ξ(ω) = (1/(T−t0)) ∫ ω_s ds（梯形公式，对分段线性路径精确）"""
    def fn(times, values):
        span = times[-1] - times[0]
        if span <= 0:
            return values[:, -1, coord].copy()
        series = values[:, :, coord]
        return np.sum(0.5 * (series[:, 1:] + series[:, :-1]) * np.diff(times)[None, :], axis=1) / span
    return PathFunctional(name="time_average", fn=fn)


FUNCTIONALS = {
    "constant": constant,
    "zero": lambda: constant(0.0),
    "terminal": terminal_value,
    "terminal_square": terminal_square,
    "capped_square": capped_square,
    "cosine_terminal": cosine_terminal,
    "sine_terminal": sine_terminal,
    "digital": digital,
    "running_max": running_max,
    "time_average": time_average,
}


def make_functional(kind: str, **params) -> PathFunctional:
    """
    按名称构造泛函

    :param kind: 注册表中的名称
    :param params: 泛函参数，例如 constant 的 c、capped_square 的 cap
    """
    factory = FUNCTIONALS.get(kind)
    if factory is None:
        raise ConfigurationError(f"未知泛函: {kind}，可选 {sorted(FUNCTIONALS)}")
    try:
        return factory(**params)
    except TypeError as e:
        raise ConfigurationError(f"泛函 {kind} 参数错误: {e}")


# ----------------------------------------------------------------------
# 随机 HJB 的系数
#
# 系数看到的路径信息只有当前值 current（真实路径或冻结路径在当前时刻的取值），
# 终端函数看到整条路径。所有函数按样本批量计算。
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Coefficient:
    """b 或 σ：(s, current (n,), x (n,), alpha) -> (n,)"""
    name: str
    fn: Callable
    bound: float = math.inf

    def __call__(self, s, current, x, alpha) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fn(s, current, x, alpha), dtype=float), current.shape)


@dataclass(frozen=True, eq=False)
class Driver:
    """
    BSDE 生成元 f

    kind = affine:  fn(s, current, x, alpha) -> (a, beta, f0)，f = a·y + beta·z + f0
    kind = general: fn(s, current, x, y, alpha) -> f，不依赖 z
    y_lipschitz:    |∂_y f| 的界
    source_bound:   sup|f(·, 0, 0, ·)|
    """
    name: str
    kind: str
    fn: Callable
    y_lipschitz: float = 0.0
    source_bound: float = 0.0

    @property
    def is_affine(self) -> bool:
        return self.kind == "affine"

    def affine(self, s, current, x, alpha):
        a, beta, f0 = self.fn(s, current, x, alpha)
        shape = current.shape
        return (np.broadcast_to(np.asarray(a, dtype=float), shape),
                np.broadcast_to(np.asarray(beta, dtype=float), shape),
                np.broadcast_to(np.asarray(f0, dtype=float), shape))

    def general(self, s, current, x, y, alpha) -> np.ndarray:
        if self.is_affine:
            a, _, f0 = self.affine(s, current, x, alpha)
            return a * y + f0
        return np.broadcast_to(np.asarray(self.fn(s, current, x, y, alpha), dtype=float), current.shape)


@dataclass(frozen=True, eq=False)
class StateTerminal:
    """g(ω, x)：(times (K+1,), path (n, K+1), x (n,)) -> (n,)"""
    name: str
    fn: Callable
    bound: float = math.inf

    def __call__(self, times, path, x) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fn(times, path, x), dtype=float), x.shape)


DRIFTS = {
    "zero": lambda: Coefficient("zero", lambda s, c, x, a: 0.0, bound=0.0),
    "control": lambda scale=1.0: Coefficient("control", lambda s, c, x, a: scale * a, bound=abs(scale)),
    "path_reverting": lambda kappa=1.0, cap=1.0: Coefficient(
        "path_reverting", lambda s, c, x, a: a - kappa * np.clip(c, -cap, cap), bound=math.inf),
}

VOLATILITIES = {
    "zero": lambda: Coefficient("zero", lambda s, c, x, a: 0.0, bound=0.0),
    "constant": lambda sigma=1.0: Coefficient("constant", lambda s, c, x, a: sigma, bound=abs(sigma)),
    "control": lambda sigma=1.0: Coefficient("control", lambda s, c, x, a: sigma * abs(a), bound=math.inf),
}


def _affine(name, fn, y_lipschitz=0.0, source_bound=0.0) -> Driver:
    return Driver(name=name, kind="affine", fn=fn, y_lipschitz=y_lipschitz, source_bound=source_bound)


DRIVERS = {
    "zero": lambda: _affine("zero", lambda s, c, x, a: (0.0, 0.0, 0.0)),
    "discount": lambda c=1.0: _affine("discount", lambda s, cur, x, a: (-c, 0.0, 0.0), y_lipschitz=abs(c)),
    "linear_z": lambda beta=0.5, source=0.0: _affine(
        "linear_z", lambda s, c, x, a: (0.0, beta, source), source_bound=abs(source)),
    "path_source": lambda cap=4.0: _affine(
        "path_source", lambda s, c, x, a: (0.0, 0.0, np.minimum(c * c, cap)), source_bound=cap),
    "cos_source": lambda amplitude=1.0: _affine(
        "cos_source", lambda s, c, x, a: (0.0, 0.0, amplitude * np.cos(c)), source_bound=abs(amplitude)),
    "control_cost": lambda k=0.5: _affine(
        "control_cost", lambda s, c, x, a: (0.0, 0.0, -k * a * a), source_bound=math.inf),
    "general_linear": lambda c=1.0: Driver(
        "general_linear", "general", lambda s, cur, x, y, a: -c * y, y_lipschitz=abs(c)),
    "saturating": lambda c=1.0, source=0.0: Driver(
        "saturating", "general", lambda s, cur, x, y, a: -c * np.tanh(y) + source, y_lipschitz=abs(c),
        source_bound=abs(source)),
}

TERMINALS = {
    "zero": lambda: StateTerminal("zero", lambda times, path, x: 0.0, bound=0.0),
    "one": lambda: StateTerminal("one", lambda times, path, x: 1.0, bound=1.0),
    "state": lambda: StateTerminal("state", lambda times, path, x: x),
    "state_plus_path": lambda: StateTerminal("state_plus_path", lambda times, path, x: x + path[:, -1]),
    "capped_state_square": lambda cap=4.0: StateTerminal(
        "capped_state_square", lambda times, path, x: np.minimum(x * x, cap), bound=cap),
    "path_average": lambda: StateTerminal("path_average", _path_average),
}


def _path_average(times, path, x):
    span = times[-1] - times[0]
    return np.sum(0.5 * (path[:, 1:] + path[:, :-1]) * np.diff(times)[None, :], axis=1) / span


def _lookup(table: dict, label: str, kind: str, params: dict):
    factory = table.get(kind)
    if factory is None:
        raise ConfigurationError(f"未知{label}: {kind}，可选 {sorted(table)}")
    try:
        return factory(**params)
    except TypeError as e:
        raise ConfigurationError(f"{label} {kind} 参数错误: {e}")


def make_drift(kind: str, **params) -> Coefficient:
    return _lookup(DRIFTS, "漂移", kind, params)


def make_volatility(kind: str, **params) -> Coefficient:
    return _lookup(VOLATILITIES, "扩散", kind, params)


def make_driver(kind: str, **params) -> Driver:
    return _lookup(DRIVERS, "生成元", kind, params)


def make_terminal(kind: str, **params) -> StateTerminal:
    return _lookup(TERMINALS, "终端函数", kind, params)


# ----------------------------------------------------------------------
# 博弈的系数
#
# σ 与 f 同时依赖两方的控制 (α, β)。生成元不依赖 z，关于 y 仿射：f = a·y + f0。
# 收益矩阵类生成元按控制集中的位置索引，工厂函数需要 U 与 V。
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GameCoefficient:
    """σ：(s, current (n,), alpha, beta) -> (n,)"""
    name: str
    fn: Callable
    bound: float = math.inf

    def __call__(self, s, current, alpha, beta) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fn(s, current, alpha, beta), dtype=float), np.shape(current))


@dataclass(frozen=True, eq=False)
class GameDriver:
    """
    fn(s, current, alpha, beta) -> (a, f0)

    y_lipschitz:  |a| 的界
    source_bound: sup|f0|
    """
    name: str
    fn: Callable
    y_lipschitz: float = 0.0
    source_bound: float = 0.0

    def __call__(self, s, current, alpha, beta):
        a, f0 = self.fn(s, current, alpha, beta)
        shape = np.shape(current)
        return (np.broadcast_to(np.asarray(a, dtype=float), shape),
                np.broadcast_to(np.asarray(f0, dtype=float), shape))

    def value(self, s, current, y, alpha, beta) -> np.ndarray:
        a, f0 = self(s, current, alpha, beta)
        return a * y + f0


def _payoff_table(U, V, payoff):
    table = np.asarray(payoff, dtype=float)
    if table.shape != (len(U), len(V)):
        raise ConfigurationError(f"收益矩阵形状应为 ({len(U)}, {len(V)})，实际为 {table.shape}")
    index = {(float(a), float(b)): float(table[i, j]) for i, a in enumerate(U) for j, b in enumerate(V)}
    return index, float(np.max(np.abs(table)))


def _matrix_driver(U, V, payoff, discount=0.0) -> GameDriver:
    index, bound = _payoff_table(U, V, payoff)
    return GameDriver("matrix", lambda s, c, a, b: (-discount, index[(float(a), float(b))]),
                      y_lipschitz=abs(discount), source_bound=bound)


def _path_matrix_driver(U, V, payoff, amplitude=0.5) -> GameDriver:
    index, bound = _payoff_table(U, V, payoff)
    return GameDriver("path_matrix", lambda s, c, a, b: (0.0, index[(float(a), float(b))] + amplitude * np.cos(c)),
                      source_bound=bound + abs(amplitude))


GAME_VOLATILITIES = {
    "constant": lambda U, V, sigma=1.0: GameCoefficient("constant", lambda s, c, a, b: sigma, bound=abs(sigma)),
    "controlled": lambda U, V, base=1.0, alpha_scale=0.5, beta_scale=0.5: GameCoefficient(
        "controlled", lambda s, c, a, b: base + alpha_scale * abs(a) + beta_scale * abs(b),
        bound=abs(base) + abs(alpha_scale) * max(abs(a) for a in U) + abs(beta_scale) * max(abs(b) for b in V)),
    "path_cosine": lambda U, V, base=1.0, amplitude=0.5: GameCoefficient(
        "path_cosine", lambda s, c, a, b: base + amplitude * np.cos(c), bound=abs(base) + abs(amplitude)),
}

GAME_DRIVERS = {
    "zero": lambda U, V: GameDriver("zero", lambda s, c, a, b: (0.0, 0.0)),
    "discount": lambda U, V, c=1.0: GameDriver("discount", lambda s, cur, a, b: (-c, 0.0), y_lipschitz=abs(c)),
    "matrix": _matrix_driver,
    "path_matrix": _path_matrix_driver,
}


def make_game_volatility(kind: str, U, V, **params) -> GameCoefficient:
    return _lookup(GAME_VOLATILITIES, "博弈扩散", kind, dict(params, U=tuple(U), V=tuple(V)))


def make_game_driver(kind: str, U, V, **params) -> GameDriver:
    return _lookup(GAME_DRIVERS, "博弈生成元", kind, dict(params, U=tuple(U), V=tuple(V)))
