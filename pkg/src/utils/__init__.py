"""
共通ユーティリティモジュール
"""

from src.utils.parallel import THREADS_ENV, resolve_max_workers
from src.utils.seeding import derive_rng
from src.utils.stats import gini

__all__ = [
    'THREADS_ENV',
    'resolve_max_workers',
    'derive_rng',
    'gini',
]
