"""
3Dボックスモジュール

Box3D と、回転矩形の BEV IoU（shapely による凸多角形クリッピング）、貪欲 NMS を提供します。
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Sequence

import numpy as np
from shapely.geometry import Polygon

logger = logging.getLogger(__name__)

CLASS_NAMES = ('car', 'truck', 'pedestrian')


class DegenerateBoxError(Exception):
    """面積ゼロまたは不正なボックス"""
    pass


def normalize_yaw(yaw: float) -> float:
    """ヨー角を (−π, π] に正規化"""
    wrapped = math.atan2(math.sin(yaw), math.cos(yaw))
    return math.pi if wrapped <= -math.pi else wrapped


@dataclass(frozen=True)
class Box3D:
    """
    3Dボックス

    (x, y, z) は中心、l はヨー方向の長さ、w は横幅。
    label はクラスID（遮蔽物は -1）、score は予測のみ使用。
    """
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    label: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise DegenerateBoxError(f"サイズは正である必要があります: w={self.w} l={self.l} h={self.h}")

    def bev_corners(self) -> np.ndarray:
        """BEV の4隅（反時計回り、4×2）"""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half_l, half_w = self.l / 2.0, self.w / 2.0
        local = np.array([[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]])
        rotation = np.array([[c, -s], [s, c]])
        return local @ rotation.T + np.array([self.x, self.y])

    def polygon(self) -> Polygon:
        return Polygon(self.bev_corners())

    def contains(self, points: np.ndarray) -> np.ndarray:
        """点群 (N×3 以上) のうちボックス内部にある点のマスク"""
        points = np.asarray(points, dtype=np.float64)
        dx = points[:, 0] - self.x
        dy = points[:, 1] - self.y
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local_x = c * dx + s * dy
        local_y = -s * dx + c * dy
        local_z = points[:, 2] - self.z
        return ((np.abs(local_x) <= self.l / 2.0)
                & (np.abs(local_y) <= self.w / 2.0)
                & (np.abs(local_z) <= self.h / 2.0))

    def with_score(self, score: float) -> 'Box3D':
        return replace(self, score=float(score))

    def to_dict(self) -> Dict[str, float]:
        return {key: (int(v) if key == 'label' else float(v)) for key, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> 'Box3D':
        return cls(**{key: (int(v) if key == 'label' else float(v)) for key, v in data.items()})


def bev_iou(a: Box3D, b: Box3D) -> float:
    """
    回転矩形の BEV IoU

    Raises:
        DegenerateBoxError: どちらかの BEV 面積が 0
    """
    poly_a, poly_b = a.polygon(), b.polygon()
    if poly_a.area <= 0 or poly_b.area <= 0:
        raise DegenerateBoxError("面積ゼロのボックスは IoU を計算できません")
    inter = poly_a.intersection(poly_b).area
    union = poly_a.area + poly_b.area - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def nms(boxes: Sequence[Box3D], iou_threshold: float) -> List[Box3D]:
    """
    クラスごとの貪欲 NMS（スコア降順、同スコアは入力順）

    Args:
        boxes: 候補ボックス
        iou_threshold: この値より大きい IoU の後続候補を抑制

    Returns:
        残ったボックス（スコア降順）
    """
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: List[Box3D] = []
    for i in order:
        candidate = boxes[i]
        suppressed = any(
            k.label == candidate.label and bev_iou(k, candidate) > iou_threshold
            for k in kept
        )
        if not suppressed:
            kept.append(candidate)
    return kept
