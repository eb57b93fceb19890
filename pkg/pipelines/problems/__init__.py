import os
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

from utils.errors import ConfigurationError


class ProblemConfig:
    """
    YAML 问题配置

    保存解析后的数据与每个键所在的行号，校验失败时报告 "文件:行号: 原因"。
    """

    def __init__(self, data: Dict[str, Any], marks: Dict[Tuple[str, ...], int], source: str,
                 prefix: Tuple[str, ...] = ()):
        self.data = data
        self.marks = marks
        self.source = source
        self.prefix = prefix

    def line(self, key: Optional[str] = None) -> Optional[int]:
        path = self.prefix + ((key,) if key else ())
        while path:
            if path in self.marks:
                return self.marks[path]
            path = path[:-1]
        return None

    def fail(self, key: Optional[str], message: str):
        line = self.line(key)
        where = f"{self.source}:{line}" if line else self.source
        label = ".".join(self.prefix + ((key,) if key else ()))
        raise ConfigurationError(f"{where}: {label}: {message}" if label else f"{where}: {message}")

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, default: Any = None, kind: Optional[type] = None, positive: bool = False,
            nonnegative: bool = False, required: bool = False) -> Any:
        """
        读取字段并校验

        :param kind: float / int / str / bool / list / dict
        :param positive: 数值必须 > 0
        :param nonnegative: 数值必须 >= 0
        :param required: 缺失时报错
        """
        if key not in self.data:
            if required:
                self.fail(None, f"缺少必填字段 '{key}'")
            return default
        value = self.data[key]
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(key, f"应为数值，实际为 {value!r}")
            value = float(value)
        elif kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(key, f"应为整数，实际为 {value!r}")
        elif kind is not None and not isinstance(value, kind):
            self.fail(key, f"应为 {kind.__name__}，实际为 {value!r}")
        if positive and not value > 0:
            self.fail(key, f"必须为正，实际为 {value}")
        if nonnegative and not value >= 0:
            self.fail(key, f"必须非负，实际为 {value}")
        return value

    def section(self, key: str, required: bool = True) -> "ProblemConfig":
        value = self.get(key, default=None, required=required)
        if value is None:
            return ProblemConfig({}, self.marks, self.source, self.prefix + (key,))
        if not isinstance(value, dict):
            self.fail(key, f"应为映射表，实际为 {value!r}")
        return ProblemConfig(value, self.marks, self.source, self.prefix + (key,))

    def check_keys(self, allowed: Iterable[str]):
        allowed = set(allowed)
        for key in self.data:
            if key not in allowed:
                self.fail(key, f"未知字段，可选 {sorted(allowed)}")

    def params(self, exclude: Iterable[str] = ("type",)) -> Dict[str, Any]:
        exclude = set(exclude)
        return {k: v for k, v in self.data.items() if k not in exclude}


def _collect_marks(node, prefix: Tuple[str, ...], marks: Dict[Tuple[str, ...], int]):
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            marks[path] = key_node.start_mark.line + 1
            _collect_marks(value_node, path, marks)


def resolve_problem_path(name_or_path: str) -> str:
    """名称在本目录下查找 <name>.yaml，否则按路径处理"""
    if os.path.exists(name_or_path):
        return name_or_path
    base_dir = os.path.dirname(__file__)
    candidate = os.path.join(base_dir, f"{name_or_path}.yaml")
    if os.path.exists(candidate):
        return candidate
    raise ConfigurationError(f"找不到问题配置: {name_or_path}")


def load_problem(name_or_path: str, kind: Optional[str] = None) -> ProblemConfig:
    """
    加载问题配置

    参数:
        name_or_path: 内置问题名（heat, shjb_drift, game_saddle 等）或 YAML 文件路径
        kind: 期望的问题类型（cascade / shjb / game），不符时报错

    返回:
        ProblemConfig
    """
    yaml_path = resolve_problem_path(name_or_path)
    with open(yaml_path, "r", encoding="utf-8") as f:
        text = f.read()
    source = os.path.basename(yaml_path)
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigurationError(f"{source}{line}: YAML 解析失败: {getattr(e, 'problem', e)}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: 顶层必须是映射表")
    marks: Dict[Tuple[str, ...], int] = {}
    _collect_marks(node, (), marks)
    config = ProblemConfig(data, marks, source)
    if kind is not None and config.get("kind", kind, kind=str) != kind:
        config.fail("kind", f"期望问题类型 {kind}")
    return config


def list_problems() -> list:
    base_dir = os.path.dirname(__file__)
    return sorted(f[:-5] for f in os.listdir(base_dir) if f.endswith(".yaml"))
