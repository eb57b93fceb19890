import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "settings")

import django  # noqa: E402

django.setup()

from core.paths import SampledPath  # noqa: E402
from utils.parallel import WorkerPool, serial_pool  # noqa: E402


@pytest.fixture
def pool():
    return serial_pool()


@pytest.fixture
def threaded_pool():
    # 与 serial_pool 相同的分块，只是多线程
    return WorkerPool(workers=3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def _random_walk(rng, T=1.0, steps=50, dim=1):
    times = np.linspace(0.0, T, steps + 1)
    increments = rng.normal(scale=np.sqrt(T / steps), size=(steps, dim))
    values = np.vstack([np.zeros((1, dim)), np.cumsum(increments, axis=0)])
    return SampledPath(times=times, values=values, t_end=T)


@pytest.fixture
def walk(rng):
    """[0, T] 上的随机折线工厂"""
    return lambda T=1.0, steps=50, dim=1: _random_walk(rng, T, steps, dim)
