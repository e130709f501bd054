"""
評価モジュール

難易度区分ごとの per-class AP、区分 mAP、全体 mAP、GT 数加重平均（Avg）を計算し、
EvalReport として構造化テキスト・CSV 向けに整形します。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from src.detection.boxes import CLASS_NAMES, Box3D
from src.evaluation.ap import average_precision
from src.evaluation.difficulty import DEFAULT_OCCLUSION_THRESHOLD, TIERS, DifficultyTier, classify_difficulty
from src.evaluation.matching import DEFAULT_IOU_THRESHOLD, match_detections, score_order
from src.synth.scene import Scene, SceneSample

logger = logging.getLogger(__name__)

OVERALL = 'overall'
TIER_KEYS = tuple(t.value for t in TIERS)
REPORT_COLUMNS = ['class', 'tier', 'ap', 'support']


class EvaluationError(Exception):
    """評価関連のエラー"""
    pass


@dataclass
class EvaluationStats:
    """評価統計情報"""
    scenes_evaluated: int = 0
    predictions: int = 0
    gt_boxes: int = 0
    true_positives: int = 0
    false_positives: int = 0

    def to_dict(self) -> Dict[str, Any]:
        precision = 0.0
        if self.true_positives + self.false_positives > 0:
            precision = self.true_positives / (self.true_positives + self.false_positives)
        return {
            'scenes_evaluated': self.scenes_evaluated,
            'predictions': self.predictions,
            'gt_boxes': self.gt_boxes,
            'true_positives': self.true_positives,
            'false_positives': self.false_positives,
            'precision': precision,
        }

    def reset(self):
        self.scenes_evaluated = 0
        self.predictions = 0
        self.gt_boxes = 0
        self.true_positives = 0
        self.false_positives = 0


@dataclass
class EvalReport:
    """
    評価レポート

    ap[class][tier] は GT が無い組み合わせで None（0 とは区別する）。
    """
    ap: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    support: Dict[str, Dict[str, int]] = field(default_factory=dict)
    map_by_tier: Dict[str, Optional[float]] = field(default_factory=dict)
    gt_counts: Dict[str, int] = field(default_factory=dict)
    pred_counts: Dict[str, int] = field(default_factory=dict)
    overall_map: Optional[float] = None
    avg: Optional[float] = None
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    num_scenes: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'num_scenes': self.num_scenes,
            'iou_threshold': self.iou_threshold,
            'map': {**{k: self.map_by_tier.get(k) for k in TIER_KEYS},
                    'avg': self.avg, OVERALL: self.overall_map},
            'gt_counts': dict(self.gt_counts),
            'pred_counts': dict(self.pred_counts),
            'ap': {c: dict(tiers) for c, tiers in self.ap.items()},
            'support': {c: dict(tiers) for c, tiers in self.support.items()},
        }

    def to_rows(self) -> List[Dict[str, Any]]:
        """CSV 行（class, tier, ap, support）"""
        rows = []
        for name in CLASS_NAMES:
            for tier in TIER_KEYS + (OVERALL,):
                rows.append({
                    'class': name,
                    'tier': tier,
                    'ap': self.ap.get(name, {}).get(tier),
                    'support': self.support.get(name, {}).get(tier, 0),
                })
        return rows

    def summary_row(self) -> Dict[str, Any]:
        """区分 mAP の1行要約（アブレーション表用）"""
        return {**{f"map_{k}": self.map_by_tier.get(k) for k in TIER_KEYS},
                'map_avg': self.avg, 'map_overall': self.overall_map}

    def summary_text(self) -> str:
        def fmt(value: Optional[float]) -> str:
            return '   -  ' if value is None else f"{value * 100:6.2f}"

        header = f"{'class':<12}" + ''.join(f"{t.label:>10}" for t in TIERS) + f"{'Overall':>10}"
        lines = [f"mAP3D (BEV IoU ≥ {self.iou_threshold}) シーン数={self.num_scenes}", header]
        for name in CLASS_NAMES:
            tiers = self.ap.get(name, {})
            lines.append(f"{name:<12}" + ''.join(f"{fmt(tiers.get(k)):>10}" for k in TIER_KEYS + (OVERALL,)))
        lines.append(f"{'mAP':<12}" + ''.join(f"{fmt(self.map_by_tier.get(k)):>10}" for k in TIER_KEYS)
                     + f"{fmt(self.overall_map):>10}")
        lines.append(f"Avg: {fmt(self.avg).strip()}")
        return '\n'.join(lines)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


class Evaluator:
    """難易度区分つき mAP 評価器"""

    def __init__(self, iou_threshold: float = DEFAULT_IOU_THRESHOLD, score_threshold: float = 0.0,
                 occlusion_threshold: float = DEFAULT_OCCLUSION_THRESHOLD):
        """
        Evaluator初期化

        Args:
            iou_threshold: マッチ判定の BEV IoU 閾値
            score_threshold: これ以下のスコアの予測は除外
            occlusion_threshold: Easy から外す遮蔽率
        """
        self.iou_threshold = iou_threshold
        self.score_threshold = score_threshold
        self.occlusion_threshold = occlusion_threshold
        self._stats = EvaluationStats()

    def get_stats(self) -> Dict[str, Any]:
        return self._stats.to_dict()

    def reset_stats(self):
        self._stats.reset()

    def tiers_of(self, scene: Scene) -> List[DifficultyTier]:
        """シーン内 GT の難易度区分"""
        if len(scene.point_counts) != len(scene.boxes) or len(scene.occlusion) != len(scene.boxes):
            raise EvaluationError(f"箱内点数・遮蔽率が未計算です（シーン {scene.scene_id}）")
        ox, oy = scene.lidar.position[0], scene.lidar.position[1]
        return [classify_difficulty(math.hypot(box.x - ox, box.y - oy), scene.point_counts[i],
                                    scene.occlusion[i], self.occlusion_threshold)
                for i, box in enumerate(scene.boxes)]

    def _check_labels(self, boxes: Sequence[Box3D], scene_id: str, kind: str):
        for box in boxes:
            if not 0 <= box.label < len(CLASS_NAMES):
                raise EvaluationError(f"未知のクラスIDです: {box.label}（{kind}, シーン {scene_id}）")

    def evaluate(self, preds: Mapping[str, Sequence[Box3D]],
                 scenes: Sequence[Union[Scene, SceneSample]]) -> EvalReport:
        """
        評価を実行

        Args:
            preds: シーンID → 予測ボックス
            scenes: 評価対象シーン（SceneSample も可）

        Returns:
            EvalReport

        Raises:
            EvaluationError: シーンが空、未知のクラスID、分割外のシーンID
        """
        scenes = [s.scene if isinstance(s, SceneSample) else s for s in scenes]
        if not scenes:
            raise EvaluationError("評価対象のシーンがありません")
        known = {s.scene_id for s in scenes}
        extra = sorted(set(preds) - known)
        if extra:
            raise EvaluationError(f"評価対象外のシーンの予測があります: {extra[:3]}")

        prepared = []
        for scene in scenes:
            scene_preds = [b for b in preds.get(scene.scene_id, []) if b.score > self.score_threshold]
            self._check_labels(scene_preds, scene.scene_id, '予測')
            self._check_labels(scene.boxes, scene.scene_id, 'GT')
            prepared.append((scene, scene_preds, self.tiers_of(scene)))
            self._stats.scenes_evaluated += 1
            self._stats.predictions += len(scene_preds)
            self._stats.gt_boxes += len(scene.boxes)

        if not any(p for _, p, _ in prepared):
            logger.warning("予測が1件もありません")

        report = EvalReport(iou_threshold=self.iou_threshold, num_scenes=len(scenes))
        for tier_key in TIER_KEYS + (OVERALL,):
            report.pred_counts[tier_key] = 0
        for label, name in enumerate(CLASS_NAMES):
            report.ap[name] = {}
            report.support[name] = {}
            for tier_key in TIER_KEYS + (OVERALL,):
                ap, support, counted = self._class_tier_ap(prepared, label, tier_key)
                report.ap[name][tier_key] = ap
                report.support[name][tier_key] = support
                report.pred_counts[tier_key] += counted

        for tier_key in TIER_KEYS:
            report.gt_counts[tier_key] = sum(report.support[n][tier_key] for n in CLASS_NAMES)
            report.map_by_tier[tier_key] = _mean([report.ap[n][tier_key] for n in CLASS_NAMES])
        report.gt_counts[OVERALL] = sum(report.support[n][OVERALL] for n in CLASS_NAMES)
        report.overall_map = _mean([report.ap[n][OVERALL] for n in CLASS_NAMES])

        weighted = [(report.gt_counts[k], report.map_by_tier[k]) for k in TIER_KEYS
                    if report.map_by_tier[k] is not None and report.gt_counts[k] > 0]
        total = sum(n for n, _ in weighted)
        report.avg = sum(n * m for n, m in weighted) / total if total else None

        logger.info(f"評価完了: シーン数={len(scenes)} mAP(overall)={report.overall_map} Avg={report.avg}")
        return report

    def _class_tier_ap(self, prepared, label: int, tier_key: str):
        """1クラス・1区分の AP、評価対象 GT 数、数えた予測数"""
        scores: List[float] = []
        hits: List[bool] = []
        num_gt = 0
        for scene, scene_preds, tiers in prepared:
            class_preds = [b for b in scene_preds if b.label == label]
            gt_index = [i for i, b in enumerate(scene.boxes) if b.label == label]
            gts = [scene.boxes[i] for i in gt_index]
            if tier_key == OVERALL:
                ignored = [False] * len(gts)
            else:
                ignored = [tiers[i].value != tier_key for i in gt_index]
            num_gt += sum(1 for flag in ignored if not flag)
            result = match_detections(class_preds, gts, self.iou_threshold, ignored)

            matched = {p for p, _, _ in result.pairs}
            for p in score_order(class_preds):
                if p in matched:
                    scores.append(class_preds[p].score)
                    hits.append(True)
                elif p in result.unmatched_preds:
                    scores.append(class_preds[p].score)
                    hits.append(False)
            if tier_key == OVERALL:
                self._stats.true_positives += result.num_tp
                self._stats.false_positives += result.num_fp
        return average_precision(hits, scores, num_gt), num_gt, len(hits)


def evaluate(preds: Mapping[str, Sequence[Box3D]], scenes: Sequence[Union[Scene, SceneSample]],
             iou_threshold: float = DEFAULT_IOU_THRESHOLD, score_threshold: float = 0.0,
             occlusion_threshold: float = DEFAULT_OCCLUSION_THRESHOLD) -> EvalReport:
    """Evaluator の簡易呼び出し"""
    evaluator = Evaluator(iou_threshold, score_threshold, occlusion_threshold)
    return evaluator.evaluate(preds, scenes)
