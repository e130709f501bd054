"""
ワーカー数の決定

設定値と KANFUSE_THREADS 環境変数（上限）から並列ワーカー数を決めます。
"""

import logging
import os
from typing import Optional

logger = logging.getLogger(__name__)

THREADS_ENV = 'KANFUSE_THREADS'
DEFAULT_MAX_WORKERS = 4


def env_thread_cap() -> Optional[int]:
    """KANFUSE_THREADS の値（未設定・不正なら None）"""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == '':
        return None
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"{THREADS_ENV} が整数ではありません: {raw!r}（無視します）")
        return None
    if value < 1:
        logger.warning(f"{THREADS_ENV} は1以上が必要です: {value}（無視します）")
        return None
    return value


def resolve_max_workers(configured: Optional[int], total_operations: int) -> int:
    """
    ワーカー数を決定

    Args:
        configured: 設定値（None または 0 以下なら CPU 数から決める）
        total_operations: 処理単位の数

    Returns:
        1 以上、total_operations 以下（total_operations が 0 なら 1）
    """
    if isinstance(configured, int) and configured > 0:
        workers = configured
    else:
        workers = max(1, min(DEFAULT_MAX_WORKERS, os.cpu_count() or 2))

    cap = env_thread_cap()
    if cap is not None:
        workers = min(workers, cap)
    return max(1, min(workers, max(total_operations, 1)))
