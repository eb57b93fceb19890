import os
import json
import math
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from .logger import get_logger

logger = get_logger(name="utils.result_exporter")


def to_builtin(value: Any) -> Any:
    """把 numpy / dataclass 结果递归转换为可 JSON 序列化的内建类型"""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, pd.DataFrame):
        return to_builtin(value.to_dict(orient="records"))
    if isinstance(value, np.ndarray):
        return [to_builtin(v) for v in value.tolist()]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        # JSON 不支持 inf/nan，统一写成字符串
        if math.isnan(value) or math.isinf(value):
            return str(value)
        return value
    if hasattr(value, "to_dict"):
        return to_builtin(value.to_dict())
    return value


def dumps_json(payload: Dict[str, Any]) -> str:
    """
    规范化 JSON 输出

    排序键、固定缩进，且不含时间戳，相同输入得到逐字节相同的输出。
    """
    return json.dumps(to_builtin(payload), sort_keys=True, indent=2, ensure_ascii=False)


class ResultExporter:
    """
    实验结果导出工具，负责 JSON 摘要和 CSV 矩阵的落盘
    """

    def __init__(self, output_dir: str = 'results'):
        """
        初始化导出工具

        :param output_dir: 导出文件保存目录
        """
        self.output_dir = output_dir
        if not os.path.exists(output_dir):
            os.makedirs(output_dir, exist_ok=True)
        logger.debug(f"初始化ResultExporter，输出目录: {output_dir}")

    def _resolve(self, filename: str) -> str:
        if os.path.isabs(filename) or os.path.dirname(filename):
            directory = os.path.dirname(filename)
            if directory and not os.path.exists(directory):
                os.makedirs(directory, exist_ok=True)
            return filename
        return os.path.join(self.output_dir, filename)

    def export_json(self, filename: str, payload: Dict[str, Any]) -> str:
        """
        导出 JSON 摘要

        :param filename: 文件名或路径
        :param payload: 结果字典
        :return: 写入的文件路径
        """
        path = self._resolve(filename)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(dumps_json(payload))
            f.write("\n")
        logger.info(f"JSON结果已导出: {path}")
        return path

    def export_csv(self, filename: str, table: Union[pd.DataFrame, List[Dict[str, Any]]],
                   columns: Optional[List[str]] = None) -> str:
        """
        导出 CSV 矩阵

        :param filename: 文件名或路径
        :param table: DataFrame 或行字典列表
        :param columns: 列顺序（行字典列表时使用）
        :return: 写入的文件路径
        """
        if not isinstance(table, pd.DataFrame):
            table = pd.DataFrame(table, columns=columns)
        path = self._resolve(filename)
        # repr 格式保证浮点数可逐位还原
        table.to_csv(path, index=False, float_format=lambda v: repr(float(v)))
        logger.info(f"CSV结果已导出: {path} ({len(table)} 行)")
        return path
