# 路径与命中时间，便于外部统一导入
from core.paths import Partition, PathPoint, SampledPath, d_infinity, sup_norm
from core.hitting import ConeSpec, HittingResult, hitting_sequence, hitting_time

__all__ = [
    # 路径
    'SampledPath', 'PathPoint', 'Partition', 'sup_norm', 'd_infinity',

    # 命中时间
    'ConeSpec', 'HittingResult', 'hitting_time', 'hitting_sequence'
]
