"""
検出損失モジュール

ガウス分布で描いたヒートマップ目標に対する焦点損失（α=2, β=4）と、
GT 中心セルでの回帰 L1 損失を計算します。合計は heat + λ·reg です。
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src.detection.boxes import Box3D
from src.detection.head import REGRESSION_CHANNELS, HeadOutput, HeadShapeError
from src.encoders.pillars import PillarGridConfig
from src.tensor import ops
from src.tensor.tensor import Tensor, get_dtype

logger = logging.getLogger(__name__)

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
REGRESSION_WEIGHT = 0.25
MIN_OVERLAP = 0.7
PROB_EPS = 1e-4


def gaussian_radius(length: float, width: float, min_overlap: float = MIN_OVERLAP) -> float:
    """
    ボックスサイズ（セル単位）からヒートマップのガウス半径を求める

    中心がずれても IoU が min_overlap 以上となる最大のずれ量です。
    """
    h, w = length, width
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2

    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2

    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heat: np.ndarray, center: Tuple[int, int], radius: int) -> None:
    """heat (h, w) の center=(ix, iy) にガウス分布を最大値合成で描く（中心値は 1）"""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offsets[None, :] ** 2 + offsets[:, None] ** 2) / (2 * sigma * sigma))
    kernel[kernel < np.finfo(np.float64).eps * kernel.max()] = 0.0

    ix, iy = center
    height, width = heat.shape
    left, right = min(ix, radius), min(width - ix, radius + 1)
    top, bottom = min(iy, radius), min(height - iy, radius + 1)
    region = heat[iy - top:iy + bottom, ix - left:ix + right]
    patch = kernel[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


def box_regression_target(box: Box3D, cfg: PillarGridConfig) -> Tuple[int, int, np.ndarray]:
    """ボックス → (ix, iy, 8次元の回帰目標)"""
    fx = (box.x - cfg.x_min) / cfg.cell_size
    fy = (box.y - cfg.y_min) / cfg.cell_size
    ix, iy = int(math.floor(fx)), int(math.floor(fy))
    target = np.array([fx - ix, fy - iy, box.z, math.log(box.w), math.log(box.l), math.log(box.h),
                       math.sin(box.yaw), math.cos(box.yaw)])
    return ix, iy, target


@dataclass
class DetectionTargets:
    """1バッチ分の学習目標"""
    heatmap: np.ndarray       # (b, C, h, w)
    indices: np.ndarray       # (P,) 平坦化セル番号 (b·h + iy)·w + ix
    regression: np.ndarray    # (P, 8)

    @property
    def num_pos(self) -> int:
        return int(self.indices.size)


def build_targets(boxes_per_sample: Sequence[Sequence[Box3D]], cfg: PillarGridConfig,
                  num_classes: int) -> DetectionTargets:
    """
    GT ボックスからヒートマップ目標と回帰目標を作成

    遮蔽物（label < 0）と BEV 範囲外のボックスは無視します。
    同じセルに複数の中心がある場合は先のボックスを採用します。
    """
    b = len(boxes_per_sample)
    h, w = cfg.height, cfg.width
    heat = np.zeros((b, num_classes, h, w), dtype=np.float64)
    indices: List[int] = []
    targets: List[np.ndarray] = []
    seen = set()
    for s, boxes in enumerate(boxes_per_sample):
        for box in boxes:
            if box.label < 0:
                continue
            if box.label >= num_classes:
                raise HeadShapeError(f"クラスID {box.label} がクラス数 {num_classes} を超えています")
            ix, iy, target = box_regression_target(box, cfg)
            if not (0 <= ix < w and 0 <= iy < h):
                continue
            radius = max(0, int(gaussian_radius(box.l / cfg.cell_size, box.w / cfg.cell_size)))
            draw_gaussian(heat[s, box.label], (ix, iy), radius)
            flat = (s * h + iy) * w + ix
            if flat in seen:
                continue
            seen.add(flat)
            indices.append(flat)
            targets.append(target)
    regression = np.stack(targets) if targets else np.zeros((0, REGRESSION_CHANNELS))
    return DetectionTargets(heat, np.asarray(indices, dtype=np.int64), regression)


def _boxes_of(gt) -> List[List[Box3D]]:
    gt = [gt] if hasattr(gt, 'boxes') else list(gt)
    if not gt or all(isinstance(item, Box3D) for item in gt):
        return [list(gt)]
    return [list(getattr(item, 'boxes', item)) for item in gt]


def gather_regression(regression: Tensor, indices: np.ndarray) -> Tensor:
    """(b, 8, h, w) から平坦化セル番号の行 (P, 8) を取り出す"""
    b, c, h, w = regression.shape
    rows = ops.reshape(ops.transpose(regression, (0, 2, 3, 1)), (b * h * w, c))
    return ops.getitem(rows, indices)


def detection_loss(pred: HeadOutput, gt, cfg: PillarGridConfig,
                   regression_weight: float = REGRESSION_WEIGHT,
                   return_terms: bool = False):
    """
    焦点損失 + λ·L1 回帰損失

    Args:
        pred: ヘッド出力
        gt: サンプルごとのボックス列（Scene の列、または Box3D 列の列。1サンプルなら Box3D 列でも可）
        cfg: BEV 設定
        regression_weight: λ
        return_terms: True なら (合計, {'heat', 'reg', 'total', 'num_pos'}) を返す

    Returns:
        スカラー Tensor
    """
    boxes = _boxes_of(gt)
    if len(boxes) != pred.batch_size:
        raise HeadShapeError(f"GT サンプル数 {len(boxes)} がバッチ数 {pred.batch_size} と一致しません")
    if pred.heatmap.shape[2:] != (cfg.height, cfg.width):
        raise HeadShapeError(f"ヒートマップ {pred.heatmap.shape} が BEV {cfg.height}x{cfg.width} と一致しません")

    targets = build_targets(boxes, cfg, pred.num_classes)
    dtype = get_dtype()
    positive = (targets.heatmap == 1.0).astype(dtype)
    negative_weight = ((1.0 - targets.heatmap) ** FOCAL_BETA * (1.0 - positive)).astype(dtype)
    num_pos = int(positive.sum())

    p = ops.clamp(pred.heatmap, PROB_EPS, 1.0 - PROB_EPS)
    one_minus = ops.sub(1.0, p)
    pos_term = ops.reduce_sum(ops.log(p) * ops.power(one_minus, FOCAL_ALPHA) * Tensor(positive))
    neg_term = ops.reduce_sum(ops.log(one_minus) * ops.power(p, FOCAL_ALPHA) * Tensor(negative_weight))
    heat_loss = ops.neg(pos_term + neg_term) / float(max(num_pos, 1))

    if targets.num_pos:
        gathered = gather_regression(pred.regression, targets.indices)
        residual = ops.absolute(gathered - Tensor(targets.regression))
        reg_loss = ops.reduce_sum(residual) / float(targets.num_pos * REGRESSION_CHANNELS)
        total = heat_loss + reg_loss * regression_weight
    else:
        reg_loss = Tensor(np.zeros(()))
        total = heat_loss

    if not return_terms:
        return total
    terms: Dict[str, float] = {
        'heat': float(heat_loss.item()),
        'reg': float(reg_loss.item()),
        'total': float(total.item()),
        'num_pos': num_pos,
    }
    return total, terms
