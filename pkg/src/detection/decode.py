"""
ボックス復元モジュール

ヒートマップの 3×3 局所最大からボックスを復元し、BEV NMS をかけます。
また、GT ボックスから HeadOutput を直接組み立てる逆変換を提供します。
"""

import logging
import math
from typing import List, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from src.detection.boxes import Box3D, nms, normalize_yaw
from src.detection.head import REGRESSION_CHANNELS, HeadOutput
from src.detection.loss import build_targets
from src.encoders.pillars import PillarGridConfig
from src.tensor.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_SCORE_THRESH = 0.1
DEFAULT_NMS_IOU = 0.5
DEFAULT_MAX_DETECTIONS = 100
LOG_SIZE_LIMIT = 10.0


def find_peaks(heatmap: np.ndarray, score_thresh: float) -> np.ndarray:
    """
    (C, h, w) の 3×3 局所最大で score_thresh を超える位置

    Returns:
        (K, 3) = (class, iy, ix)
    """
    local_max = maximum_filter(heatmap, size=(1, 3, 3), mode='constant', cval=-np.inf)
    mask = (heatmap == local_max) & (heatmap > score_thresh)
    return np.argwhere(mask)


def decode(pred: HeadOutput, cfg: PillarGridConfig, score_thresh: float = DEFAULT_SCORE_THRESH,
           nms_iou: float = DEFAULT_NMS_IOU, sample: int = 0,
           max_detections: int = DEFAULT_MAX_DETECTIONS) -> List[Box3D]:
    """
    HeadOutput の1サンプルをボックス列へ復元

    Args:
        pred: ヘッド出力
        cfg: BEV 設定
        score_thresh: スコア閾値 [0, 1]
        nms_iou: NMS の IoU 閾値 [0, 1]
        sample: バッチ内のサンプル番号
        max_detections: NMS 前に残す候補数の上限

    Returns:
        スコア降順のボックス列
    """
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError(f"閾値は [0, 1] の範囲が必要です: score={score_thresh} iou={nms_iou}")
    heat = np.asarray(pred.heatmap.data[sample], dtype=np.float64)
    reg = np.asarray(pred.regression.data[sample], dtype=np.float64)

    peaks = find_peaks(heat, score_thresh)
    scores = heat[peaks[:, 0], peaks[:, 1], peaks[:, 2]]
    order = np.lexsort((np.arange(scores.size), -scores))[:max_detections]

    candidates: List[Box3D] = []
    for label, iy, ix in peaks[order]:
        dx, dy, z, log_w, log_l, log_h, sin_yaw, cos_yaw = reg[:, iy, ix]
        w, l, h = np.exp(np.clip([log_w, log_l, log_h], -LOG_SIZE_LIMIT, LOG_SIZE_LIMIT))
        candidates.append(Box3D(
            x=float(cfg.x_min + (ix + dx) * cfg.cell_size),
            y=float(cfg.y_min + (iy + dy) * cfg.cell_size),
            z=float(z), w=float(w), l=float(l), h=float(h),
            yaw=normalize_yaw(math.atan2(sin_yaw, cos_yaw)),
            label=int(label),
            score=float(heat[label, iy, ix]),
        ))
    kept = nms(candidates, nms_iou)
    logger.debug(f"復元: ピーク数={len(peaks)} 候補数={len(candidates)} NMS後={len(kept)}")
    return kept


def decode_batch(pred: HeadOutput, cfg: PillarGridConfig, score_thresh: float = DEFAULT_SCORE_THRESH,
                 nms_iou: float = DEFAULT_NMS_IOU) -> List[List[Box3D]]:
    return [decode(pred, cfg, score_thresh, nms_iou, sample=i) for i in range(pred.batch_size)]


def encode_head_output(boxes: Sequence[Box3D], cfg: PillarGridConfig, num_classes: int = 3) -> HeadOutput:
    """
    GT ボックスから HeadOutput を直接作成（decode の逆変換）

    ヒートマップは学習目標と同じガウス分布、回帰は中心セルのみ設定します。
    """
    targets = build_targets([list(boxes)], cfg, num_classes)
    regression = np.zeros((1, cfg.height, cfg.width, REGRESSION_CHANNELS))
    rows = regression.reshape(-1, REGRESSION_CHANNELS)
    rows[targets.indices] = targets.regression
    return HeadOutput(Tensor(targets.heatmap), Tensor(regression.transpose(0, 3, 1, 2)))
