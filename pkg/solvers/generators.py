"""
路径冻结生成元 g(s, x, y, z, Γ)

所有生成元按批量接口实现：x (N, d)，y (N,)，z (N, d)，Γ (N, d, d)，返回 (N,)。
Lipschitz 常数按变量拆分声明，供显式格式计算 CFL 与 Lax–Friedrichs 耗散系数。
"""

from abc import ABC, abstractmethod
from typing import Callable, Optional

import numpy as np

from utils.errors import ConfigurationError
from utils.logger import get_logger

logger = get_logger(name="solvers.generators")

# 特征值截断阈值，避免 (λ)^+ 在 0 附近来回跳动
EIGEN_CLAMP = 1e-12


def _clamped_eigenvalues(gamma: np.ndarray) -> np.ndarray:
    if gamma.shape[-1] == 1:
        lam = gamma[..., 0, :].copy()
    else:
        sym = 0.5 * (gamma + np.swapaxes(gamma, -1, -2))
        lam = np.linalg.eigvalsh(sym)
    lam[np.abs(lam) <= EIGEN_CLAMP] = 0.0
    return lam


class Generator(ABC):
    """
    生成元基类

    子类需要声明：
        gamma_lipschitz: 关于 Γ 的 Lipschitz 常数
        z_lipschitz:     关于 z 的 Lipschitz 常数
        y_lipschitz:     关于 y 的 Lipschitz 常数
    """
    name = None
    gamma_lipschitz = 0.0
    z_lipschitz = 0.0
    y_lipschitz = 0.0

    @abstractmethod
    def evaluate(self, s: float, x: np.ndarray, y: np.ndarray, z: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        """批量求值"""
        pass

    @property
    def lipschitz(self) -> float:
        return max(self.gamma_lipschitz, self.z_lipschitz, self.y_lipschitz)

    def __call__(self, s, x, y, z, gamma) -> float:
        """单点求值，便于测试与诊断"""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        d = x.shape[0]
        z = np.atleast_1d(np.asarray(z, dtype=float)).reshape(1, d)
        gamma = np.asarray(gamma, dtype=float).reshape(1, d, d)
        out = self.evaluate(float(s), x.reshape(1, d), np.array([float(y)]), z, gamma)
        return float(out[0])

    def shifted(self, anchor: np.ndarray) -> "Generator":
        """冻结到锚点：g^{π}(s, x, ...) = g(s, anchor + x, ...)"""
        return AnchoredGenerator(self, anchor)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "gamma_lipschitz": self.gamma_lipschitz,
            "z_lipschitz": self.z_lipschitz,
            "y_lipschitz": self.y_lipschitz,
        }


class ZeroGenerator(Generator):
    name = "zero"

    def evaluate(self, s, x, y, z, gamma):
        return np.zeros(x.shape[0])


class HeatGenerator(Generator):
    """g = coef · tr(Γ)，coef 默认 1/2"""
    name = "heat"

    def __init__(self, coef: float = 0.5):
        if coef < 0:
            raise ConfigurationError(f"热方程系数必须非负: {coef}")
        self.coef = coef
        self.gamma_lipschitz = coef

    def evaluate(self, s, x, y, z, gamma):
        return self.coef * np.trace(gamma, axis1=1, axis2=2)


class UpperBoundingGenerator(Generator):
    """
    上界方程生成元

    ḡ(y, z, Γ) = ½ sup_{0≤σ≤√(2L)I} σ²:Γ + L(|y| + |z|) + C0 = L Σ_i (λ_i(Γ))^+ + L(|y| + |z|) + C0
    """
    name = "upper"

    def __init__(self, L: float, C0: float = 0.0):
        if not L > 0:
            raise ConfigurationError(f"L 必须为正: {L}")
        if C0 < 0:
            raise ConfigurationError(f"C0 必须非负: {C0}")
        self.L = L
        self.C0 = C0
        self.gamma_lipschitz = L
        self.z_lipschitz = L
        self.y_lipschitz = L

    def evaluate(self, s, x, y, z, gamma):
        lam = _clamped_eigenvalues(gamma)
        return (self.L * np.maximum(lam, 0.0).sum(axis=1)
                + self.L * (np.abs(y) + np.linalg.norm(z, axis=1)) + self.C0)


class LowerBoundingGenerator(Generator):
    """g̲(y, z, Γ) = −L Σ_i (λ_i(Γ))^- − L(|y| + |z|) − C0"""
    name = "lower"

    def __init__(self, L: float, C0: float = 0.0):
        if not L > 0:
            raise ConfigurationError(f"L 必须为正: {L}")
        if C0 < 0:
            raise ConfigurationError(f"C0 必须非负: {C0}")
        self.L = L
        self.C0 = C0
        self.gamma_lipschitz = L
        self.z_lipschitz = L
        self.y_lipschitz = L

    def evaluate(self, s, x, y, z, gamma):
        lam = _clamped_eigenvalues(gamma)
        return (-self.L * np.maximum(-lam, 0.0).sum(axis=1)
                - self.L * (np.abs(y) + np.linalg.norm(z, axis=1)) - self.C0)


class LinearGenerator(Generator):
    """
    线性生成元 g = diffusion·tr(Γ) + drift·Σz + discount·y + source

    系数均为常数，用于 YAML 中的 custom 生成元。
    """
    name = "linear"

    def __init__(self, diffusion: float = 0.0, drift: float = 0.0, discount: float = 0.0, source: float = 0.0):
        if diffusion < 0:
            raise ConfigurationError(f"扩散系数必须非负（抛物性）: {diffusion}")
        self.diffusion = diffusion
        self.drift = drift
        self.discount = discount
        self.source = source
        self.gamma_lipschitz = diffusion
        self.z_lipschitz = abs(drift)
        self.y_lipschitz = abs(discount)

    def evaluate(self, s, x, y, z, gamma):
        return (self.diffusion * np.trace(gamma, axis1=1, axis2=2) + self.drift * z.sum(axis=1)
                + self.discount * y + self.source)


class StateSourceGenerator(Generator):
    """
    依赖当前状态的生成元 g = ½tr(Γ) + amplitude·cos(x_1)

    x 为冻结后的绝对状态（锚点加增量），用于检验路径依赖经由当前值进入的情形。
    """
    name = "state-source"

    def __init__(self, amplitude: float = 1.0, coef: float = 0.5):
        self.amplitude = amplitude
        self.coef = coef
        self.gamma_lipschitz = coef

    def evaluate(self, s, x, y, z, gamma):
        return self.coef * np.trace(gamma, axis1=1, axis2=2) + self.amplitude * np.cos(x[:, 0])


class FunctionGenerator(Generator):
    """包装任意批量函数，Lipschitz 常数由调用方声明"""
    name = "function"

    def __init__(self, fn: Callable, gamma_lipschitz: float = 0.0, z_lipschitz: float = 0.0,
                 y_lipschitz: float = 0.0, name: Optional[str] = None):
        self.fn = fn
        self.gamma_lipschitz = gamma_lipschitz
        self.z_lipschitz = z_lipschitz
        self.y_lipschitz = y_lipschitz
        if name:
            self.name = name

    def evaluate(self, s, x, y, z, gamma):
        return np.asarray(self.fn(s, x, y, z, gamma), dtype=float)


class AnchoredGenerator(Generator):
    """把空间变量平移到锚点的冻结生成元"""

    def __init__(self, base: Generator, anchor):
        self.base = base
        self.anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        self.name = f"{base.name}@anchor"
        self.gamma_lipschitz = base.gamma_lipschitz
        self.z_lipschitz = base.z_lipschitz
        self.y_lipschitz = base.y_lipschitz

    def evaluate(self, s, x, y, z, gamma):
        return self.base.evaluate(s, x + self.anchor[None, :], y, z, gamma)


def make_upper_bounding(L: float, C0: float = 0.0) -> UpperBoundingGenerator:
    return UpperBoundingGenerator(L, C0)


def make_lower_bounding(L: float, C0: float = 0.0) -> LowerBoundingGenerator:
    return LowerBoundingGenerator(L, C0)


GENERATORS = {
    "zero": ZeroGenerator,
    "heat": HeatGenerator,
    "upper": UpperBoundingGenerator,
    "lower": LowerBoundingGenerator,
    "linear": LinearGenerator,
    "state-source": StateSourceGenerator,
}


def make_generator(kind: str, **params) -> Generator:
    """
    按名称构造生成元

    :param kind: zero / heat / upper / lower / linear / state-source
    :param params: 生成元参数（upper/lower 需要 L，可选 C0）
    """
    cls = GENERATORS.get(kind)
    if cls is None:
        raise ConfigurationError(f"未知生成元类型: {kind}，可选 {sorted(GENERATORS)}")
    try:
        generator = cls(**params)
    except TypeError as e:
        raise ConfigurationError(f"生成元 {kind} 参数错误: {e}")
    logger.debug(f"构造生成元: {kind} {params}")
    return generator


def sandwich_violation(generator: Generator, L: float, C0: float, samples: int = 200, dim: int = 1,
                       seed: int = 0, scale: float = 3.0) -> float:
    """
    在随机 (y, z, Γ) 上检查 g̲ ≤ g ≤ ḡ，返回最大越界量（<= 0 表示满足）
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-scale, scale, size=(samples, dim))
    y = rng.uniform(-scale, scale, size=samples)
    z = rng.uniform(-scale, scale, size=(samples, dim))
    a = rng.uniform(-scale, scale, size=(samples, dim, dim))
    gamma = 0.5 * (a + np.swapaxes(a, 1, 2))
    s = float(rng.uniform(0.0, 1.0))
    g = generator.evaluate(s, x, y, z, gamma)
    upper = UpperBoundingGenerator(L, C0).evaluate(s, x, y, z, gamma)
    lower = LowerBoundingGenerator(L, C0).evaluate(s, x, y, z, gamma)
    return float(max(np.max(g - upper), np.max(lower - g)))
