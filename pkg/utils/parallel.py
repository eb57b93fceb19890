"""
并行执行句柄

由命令行层创建并下传给各数值模块。
结果始终按提交顺序返回，保证与 worker 数量无关的确定性。
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from utils.logger import get_logger

logger = get_logger(name="utils.parallel")

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_CHUNK_SIZE = 2048


class WorkerPool:
    """线程池包装，map_ordered 按输入顺序返回结果"""

    def __init__(self, workers: int = 1, chunk_size: int = DEFAULT_CHUNK_SIZE):
        if workers < 1:
            raise ValueError(f"worker 数量必须 >= 1: {workers}")
        if chunk_size < 1:
            raise ValueError(f"chunk_size 必须 >= 1: {chunk_size}")
        self.workers = workers
        self.chunk_size = chunk_size

    def map_ordered(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            return list(executor.map(fn, items))

    def chunks(self, n: int):
        """把 n 个样本切成固定大小的块，返回 (块序号, 起点, 终点)"""
        return [
            (index, start, min(start + self.chunk_size, n))
            for index, start in enumerate(range(0, n, self.chunk_size))
        ]


_serial_pool = None


def serial_pool() -> WorkerPool:
    """未显式传入 pool 时使用的单线程句柄"""
    global _serial_pool
    if _serial_pool is None:
        _serial_pool = WorkerPool(workers=1)
    return _serial_pool


def pool_from_env(workers: Optional[int] = None, chunk_size: int = DEFAULT_CHUNK_SIZE) -> WorkerPool:
    """
    根据环境变量构造 WorkerPool

    :param workers: 显式指定的 worker 数；为 None 时读取 PPDE_LAB_WORKERS
    :param chunk_size: 样本分块大小（决定随机数流，必须与 worker 数无关）
    """
    if workers is None:
        workers = int(os.getenv("PPDE_LAB_WORKERS", "1"))
    logger.debug(f"创建 WorkerPool: workers={workers}, chunk_size={chunk_size}")
    return WorkerPool(workers=workers, chunk_size=chunk_size)
