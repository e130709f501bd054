"""
集中度の統計
"""

import numpy as np


def gini(values) -> float:
    """
    非負値の Gini 係数（0 = 一様、1 に近いほど一点集中）

    負値は絶対値で扱います。合計が 0 なら 0。
    """
    x = np.sort(np.abs(np.asarray(values, dtype=np.float64)).ravel())
    n = x.size
    total = x.sum()
    if n == 0 or total <= 0:
        return 0.0
    ranks = np.arange(1, n + 1, dtype=np.float64)
    return float((2.0 * np.sum(ranks * x)) / (n * total) - (n + 1.0) / n)
