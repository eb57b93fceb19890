"""
实验室统一异常类型

所有数值模块抛出的异常都继承自 LabError，同时继承对应的内建异常，
便于调用方按 ValueError / RuntimeError 粗粒度捕获。
"""


class LabError(Exception):
    """ppde-lab 异常基类"""


class DomainError(LabError, ValueError):
    """时间或状态超出定义域"""


class DimensionError(LabError, ValueError):
    """路径维度不一致"""


class AnchorError(LabError, ValueError):
    """拼接后缀未锚定在原点"""


class OrderingError(LabError, ValueError):
    """时间序列非严格递增"""


class PreconditionError(LabError, ValueError):
    """调用前置条件不满足"""


class BoundError(LabError, ValueError):
    """控制超出 P_L 的漂移/扩散界"""


class ConfigurationError(LabError, ValueError):
    """配置错误（CFL、空控制族、YAML 字段非法等）"""


class StencilError(LabError, ValueError):
    """局部网格不足以构造差分模板"""


class DivergenceError(LabError, RuntimeError):
    """显式格式出现 NaN 或溢出"""

    def __init__(self, message, slice_index=None):
        super().__init__(message)
        self.slice_index = slice_index


class ConvergenceError(LabError, RuntimeError):
    """Picard 迭代不收敛"""


class BudgetError(LabError, RuntimeError):
    """递归或博弈树规模超出预算"""

    def __init__(self, message, deepest_level=None, max_depth=None):
        super().__init__(message)
        self.deepest_level = deepest_level
        self.max_depth = max_depth
