import logging
import os

LEVELS = {
    'debug': logging.DEBUG,
    'info': logging.INFO,
    'warning': logging.WARNING,
    'error': logging.ERROR,
}

LOG_FORMAT = '%(asctime)s [%(levelname)s] [%(name)s:%(lineno)d] - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def level_from_env(default='info'):
    """PPDE_LAB_LOG_LEVEL，未知取值回落到 default"""
    name = os.getenv('PPDE_LAB_LOG_LEVEL', default).lower()
    return LEVELS.get(name, LEVELS[default])


class Logger:
    """
    按 "层.模块" 命名的日志包装

    manage.py 下由 settings.LOGGING 为 core / solvers / pipelines 等上级配置控制台与文件输出；
    脱离 Django 直接调用求解器时，上级没有 handler，这里补一个控制台输出。
    """

    def __init__(self, name, level=None):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(level if level is not None else level_from_env())
        if not self.logger.hasHandlers():
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
            self.logger.addHandler(handler)

    @property
    def name(self):
        return self.logger.name

    def debug(self, message, *args, **kwargs):
        self.logger.debug(message, *args, **kwargs)

    def info(self, message, *args, **kwargs):
        self.logger.info(message, *args, **kwargs)

    def warning(self, message, *args, **kwargs):
        self.logger.warning(message, *args, **kwargs)

    def error(self, message, *args, **kwargs):
        """exc_info=True 时附带堆栈"""
        self.logger.error(message, *args, **kwargs)


def get_logger(name, level=None):
    """
    :param name: "层.模块"，如 pipelines.cascade
    :param level: 字符串或 logging 级别，缺省读 PPDE_LAB_LOG_LEVEL
    """
    if isinstance(level, str):
        level = LEVELS.get(level.lower(), logging.INFO)
    return Logger(name, level)
