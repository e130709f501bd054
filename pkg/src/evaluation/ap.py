"""
平均適合率（AP）モジュール

40 点補間 AP: 再現率 1/40, 2/40, …, 1 の各点で、その再現率以上の最大適合率を平均します。
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

NUM_RECALL_POINTS = 40


def precision_recall(is_tp: Sequence[bool], scores: Sequence[float],
                     num_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    スコア閾値を下げながら得られる適合率・再現率の列

    同スコアは入力順で処理します（呼び出し側で決定的に並べておく）。
    """
    is_tp = np.asarray(is_tp, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if is_tp.size == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind='stable')
    hits = is_tp[order].astype(np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    precision = tp / (tp + fp)
    recall = tp / float(num_gt)
    return precision, recall


def interpolated_precision(precision: np.ndarray, recall: np.ndarray,
                           num_points: int = NUM_RECALL_POINTS) -> List[float]:
    """各再現率点での補間適合率"""
    values = []
    for k in range(1, num_points + 1):
        level = k / num_points
        reached = precision[recall >= level - 1e-12]
        values.append(float(reached.max()) if reached.size else 0.0)
    return values


def average_precision(is_tp: Sequence[bool], scores: Sequence[float], num_gt: int,
                      num_points: int = NUM_RECALL_POINTS) -> Optional[float]:
    """
    40 点補間 AP

    Args:
        is_tp: 予測ごとの正解フラグ（無視された予測は含めない）
        scores: 予測スコア
        num_gt: 評価対象 GT 数

    Returns:
        AP（[0, 1]）。GT が 0 件なら None（未定義）
    """
    if num_gt <= 0:
        return None
    precision, recall = precision_recall(is_tp, scores, num_gt)
    if precision.size == 0:
        return 0.0
    return float(np.mean(interpolated_precision(precision, recall, num_points)))
