from utils.logger import Logger, get_logger
from utils.result_exporter import ResultExporter, dumps_json, to_builtin
from utils.parallel import WorkerPool, pool_from_env, serial_pool

__all__ = [
    # Logger
    'Logger', 'get_logger',

    # ResultExporter
    'ResultExporter', 'dumps_json', 'to_builtin',

    # WorkerPool
    'WorkerPool', 'pool_from_env', 'serial_pool'
]
