"""
乱数生成器の導出

実行シードと用途タグから独立した numpy Generator を作ります。
"""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode('utf-8'))


def derive_rng(seed: int, tag: str) -> np.random.Generator:
    """(seed, tag) ごとに決定的な Generator"""
    return np.random.default_rng([int(seed) & MASK64, tag_key(tag)])
