"""
検出マッチングモジュール

スコア降順の貪欲法で予測と GT を対応付けます。
IoU 計算は iou_fn で差し替え可能（既定は BEV IoU）。
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

from src.detection.boxes import Box3D, bev_iou

DEFAULT_IOU_THRESHOLD = 0.5

IouFn = Callable[[Box3D, Box3D], float]


@dataclass
class MatchResult:
    """マッチング結果（インデックスは入力リストに対するもの）"""
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_preds: List[int] = field(default_factory=list)
    unmatched_gts: List[int] = field(default_factory=list)
    ignored_preds: List[int] = field(default_factory=list)

    @property
    def num_tp(self) -> int:
        return len(self.pairs)

    @property
    def num_fp(self) -> int:
        return len(self.unmatched_preds)


def score_order(preds: Sequence[Box3D]) -> List[int]:
    """スコア降順の処理順（同点は箱の内容で決める）"""
    return sorted(range(len(preds)),
                  key=lambda i: (-preds[i].score, preds[i].label, preds[i].x, preds[i].y,
                                 preds[i].z, preds[i].w, preds[i].l, preds[i].h, preds[i].yaw))


def match_detections(preds: Sequence[Box3D], gts: Sequence[Box3D],
                     iou_thresh: float = DEFAULT_IOU_THRESHOLD,
                     ignored_gts: Optional[Sequence[bool]] = None,
                     iou_fn: IouFn = bev_iou) -> MatchResult:
    """
    貪欲マッチング

    予測をスコア降順に処理し、同クラスで未割当の GT のうち IoU 最大（≥ iou_thresh）のものに割り当てます。
    ignored_gts が真の GT に割り当たった予測は ignored_preds となり、TP にも FP にも数えません。

    Args:
        preds: 予測ボックス
        gts: GT ボックス
        iou_thresh: マッチ判定の IoU 閾値
        ignored_gts: GT ごとの無視フラグ（他の難易度区分の GT など）
        iou_fn: IoU 関数

    Returns:
        MatchResult
    """
    ignored = list(ignored_gts) if ignored_gts is not None else [False] * len(gts)
    assigned = [False] * len(gts)
    result = MatchResult()

    for p in score_order(preds):
        best_iou = -1.0
        best_gt = -1
        for g, gt in enumerate(gts):
            if assigned[g] or gt.label != preds[p].label:
                continue
            iou = iou_fn(preds[p], gt)
            if iou >= iou_thresh and iou > best_iou:
                best_iou = iou
                best_gt = g
        if best_gt < 0:
            result.unmatched_preds.append(p)
            continue
        assigned[best_gt] = True
        if ignored[best_gt]:
            result.ignored_preds.append(p)
        else:
            result.pairs.append((p, best_gt, best_iou))

    result.unmatched_gts = [g for g in range(len(gts)) if not assigned[g] and not ignored[g]]
    return result
