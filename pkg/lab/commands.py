"""
管理命令的公共部分

每个子命令解析参数、调用对应流程，把结果以规范化 JSON 写到标准输出，
可选地落盘 JSON 摘要与 CSV 矩阵。LabError 统一转换为 CommandError（退出码 1）。
"""

from typing import Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from utils.errors import LabError
from utils.logger import get_logger
from utils.parallel import WorkerPool, pool_from_env
from utils.result_exporter import ResultExporter, dumps_json

logger = get_logger(name="lab.commands")


def lab_setting(key: str, default=None):
    return getattr(settings, "PPDE_LAB", {}).get(key, default)


class LabCommand(BaseCommand):
    """
    子类实现 add_lab_arguments 与 run(options, pool)

    run 返回 (payload, table)：payload 为 JSON 摘要，table 为可选的 CSV 矩阵。
    payload 中 success 为 False 时命令以失败退出。
    """
    requires_system_checks = []
    has_table = False

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=0, help='主随机种子')
        parser.add_argument('--workers', type=int, default=None, help='worker 数，缺省读取 PPDE_LAB_WORKERS')
        parser.add_argument('--output', default=None, help='JSON 摘要输出路径')
        if self.has_table:
            parser.add_argument('--csv', default=None, help='CSV 矩阵输出路径')
        self.add_lab_arguments(parser)

    def add_lab_arguments(self, parser):
        pass

    def run(self, options: dict, pool: WorkerPool):
        raise NotImplementedError

    def make_pool(self, workers: Optional[int]) -> WorkerPool:
        if workers is None:
            workers = lab_setting("WORKERS")
        return pool_from_env(workers, chunk_size=lab_setting("CHUNK_SIZE", 2048))

    def handle(self, *args, **options):
        name = self.__module__.rsplit(".", 1)[-1]
        logger.info(f"开始执行 {name}，seed={options['seed']}")
        try:
            pool = self.make_pool(options.get('workers'))
            payload, table = self.run(options, pool)
        except LabError as e:
            logger.error(f"{name} 执行失败: {e}", exc_info=True)
            raise CommandError(str(e))

        wants_csv = self.has_table and options.get('csv') and table is not None
        if options.get('output') or wants_csv:
            exporter = ResultExporter(lab_setting("OUTPUT_DIR", "results"))
            if options.get('output'):
                exporter.export_json(options['output'], payload)
            if wants_csv:
                exporter.export_csv(options['csv'], table)
        self.stdout.write(dumps_json(payload))

        if payload.get("success") is False:
            logger.warning(f"{name} 检查未通过")
            raise CommandError(f"{name}: 检查未通过")
        logger.info(f"{name} 执行完成")
