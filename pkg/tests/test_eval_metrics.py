"""
evaluation パッケージ（難易度区分・マッチング・AP・評価レポート）のユニットテスト
"""

import numpy as np
import pytest

from src.detection.boxes import Box3D, bev_iou
from src.evaluation.ap import average_precision
from src.evaluation.difficulty import DifficultyTier, classify_difficulty
from src.evaluation.evaluator import EvaluationError, Evaluator, evaluate
from src.evaluation.matching import match_detections
from src.synth.scene import LidarPose, Scene, SceneSetConfig


def square(x, y=0.0, label=0, score=1.0):
    """2m × 2m の軸並行ボックス"""
    return Box3D(x=x, y=y, z=1.0, w=2.0, l=2.0, h=2.0, yaw=0.0, label=label, score=score)


def make_scene(index, camera):
    """Easy の car・Moderate の truck・Hard の pedestrian を1台ずつ置いたシーン"""
    shift = 0.1 * index
    boxes = [
        Box3D(20.0 + shift, 0.0, 0.75, 1.8, 4.2, 1.5, 0.1, 0),
        Box3D(45.0, 5.0 + shift, 1.5, 2.5, 8.0, 3.0, -0.2, 1),
        Box3D(60.0 - shift, -5.0, 0.85, 0.6, 0.6, 1.7, 0.0, 2),
    ]
    return Scene(seed=index, boxes=boxes, occluders=[], lidar=LidarPose(), camera=camera,
                 point_counts=[100, 30, 5], occlusion=[0.0, 0.2, 0.5], scene_id=f"scene_{index:05d}")


@pytest.fixture(scope='module')
def scenes():
    camera = SceneSetConfig().camera_model()
    return [make_scene(i, camera) for i in range(10)]


def identity_predictions(scenes, score=0.9):
    return {s.scene_id: [b.with_score(score) for b in s.boxes] for s in scenes}


def oracle_ap(hits, scores, num_gt):
    """40点補間 AP のスカラー実装"""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    tp = fp = 0
    curve = []
    for i in order:
        if hits[i]:
            tp += 1
        else:
            fp += 1
        curve.append((tp / (tp + fp), tp / num_gt))
    total = 0.0
    for k in range(1, 41):
        reached = [p for p, r in curve if r >= k / 40 - 1e-12]
        total += max(reached) if reached else 0.0
    return total / 40


def oracle_overall_map(preds, scenes, iou_thresh=0.5):
    """全区分（overall）の mAP を素朴なループで再計算"""
    aps = []
    for label in range(3):
        hits, scores, num_gt = [], [], 0
        for scene in scenes:
            gts = [b for b in scene.boxes if b.label == label]
            num_gt += len(gts)
            used = [False] * len(gts)
            class_preds = sorted([b for b in preds.get(scene.scene_id, []) if b.label == label],
                                 key=lambda b: -b.score)
            for pred in class_preds:
                best, best_iou = None, -1.0
                for g, gt in enumerate(gts):
                    iou = bev_iou(pred, gt)
                    if not used[g] and iou >= iou_thresh and iou > best_iou:
                        best, best_iou = g, iou
                if best is not None:
                    used[best] = True
                hits.append(best is not None)
                scores.append(pred.score)
        if num_gt:
            aps.append(oracle_ap(hits, scores, num_gt))
    return sum(aps) / len(aps)


class TestClassifyDifficulty:
    """難易度区分のテスト"""

    @pytest.mark.parametrize('distance, points, occlusion, expected', [
        (55.0, 10, 0.0, DifficultyTier.HARD),
        (30.0, 100, 0.0, DifficultyTier.EASY),
        (45.0, 30, 0.3, DifficultyTier.MODERATE),
        (30.0, 100, 0.1, DifficultyTier.MODERATE),
        (30.0, 10, 0.0, DifficultyTier.HARD),
        (39.9, 51, 0.0, DifficultyTier.EASY),
        (40.0, 51, 0.0, DifficultyTier.MODERATE),
        (50.0, 20, 0.0, DifficultyTier.MODERATE),
        (50.1, 100, 0.0, DifficultyTier.HARD),
    ])
    def test_examples(self, distance, points, occlusion, expected):
        """代表例と境界値"""
        assert classify_difficulty(distance, points, occlusion) == expected

    def test_branches_partition_inputs(self):
        """ランダム入力で3区分の条件がちょうど1つだけ成り立つ"""
        rng = np.random.default_rng(0)
        for _ in range(2000):
            distance = float(rng.uniform(0.0, 80.0))
            points = int(rng.integers(0, 120))
            occlusion = float(rng.uniform(0.0, 1.0))
            easy = points > 50 and distance < 40 and occlusion < 0.1
            hard = not easy and (points < 20 or distance > 50)
            moderate = not easy and not hard
            assert easy + hard + moderate == 1
            tier = classify_difficulty(distance, points, occlusion)
            assert tier == (DifficultyTier.EASY if easy else DifficultyTier.HARD if hard
                            else DifficultyTier.MODERATE)

    def test_tier_label(self):
        """表示名は先頭大文字"""
        assert DifficultyTier.MODERATE.label == 'Moderate'


class TestMatching:
    """貪欲マッチングのテスト"""

    def test_perfect_predictions(self):
        """予測が GT と同一なら全て TP"""
        gts = [square(0.0), square(10.0, label=1)]
        result = match_detections(gts, gts)
        assert result.num_tp == 2
        assert result.num_fp == 0
        assert result.unmatched_gts == []

    def test_empty_predictions(self):
        """予測なしなら GT は全て未割当"""
        result = match_detections([], [square(0.0), square(10.0)])
        assert result.pairs == []
        assert result.unmatched_gts == [0, 1]

    def test_crafted_greedy_case(self):
        """3予測/2GT の重なりで、スコア順の貪欲割当が手計算と一致する"""
        gts = [square(0.0), square(1.5)]
        preds = [square(0.5, score=0.9), square(0.25, score=0.8), square(1.5, score=0.7)]
        result = match_detections(preds, gts)
        assert [(p, g) for p, g, _ in result.pairs] == [(0, 0), (2, 1)]
        assert result.pairs[0][2] == pytest.approx(0.6)
        assert result.pairs[1][2] == pytest.approx(1.0)
        assert result.unmatched_preds == [1]
        assert result.unmatched_gts == []

    def test_class_separation(self):
        """クラスが違えば重なっていても割り当てない"""
        result = match_detections([square(0.0, label=1)], [square(0.0, label=0)])
        assert result.num_tp == 0
        assert result.num_fp == 1

    def test_threshold(self):
        """IoU が閾値未満なら割り当てない"""
        preds = [square(1.0)]
        assert match_detections(preds, [square(0.0)], iou_thresh=0.5).num_tp == 0
        assert match_detections(preds, [square(0.0)], iou_thresh=0.3).num_tp == 1

    def test_ignored_gt(self):
        """無視 GT に割り当たった予測は TP にも FP にも数えない"""
        result = match_detections([square(0.0, score=0.9), square(10.0, score=0.5)],
                                  [square(0.0), square(10.0)], ignored_gts=[True, False])
        assert result.ignored_preds == [0]
        assert [(p, g) for p, g, _ in result.pairs] == [(1, 1)]
        assert result.unmatched_gts == []

    def test_each_gt_matched_once(self):
        """同じ GT に重なる予測が複数あっても割当は1つ"""
        result = match_detections([square(0.0, score=0.9), square(0.1, score=0.8)], [square(0.0)])
        assert result.num_tp == 1
        assert result.num_fp == 1


class TestAveragePrecision:
    """40点補間 AP のテスト"""

    def test_all_correct(self):
        """全予測が正解で全 GT を検出すれば 1.0"""
        assert average_precision([True, True, True], [0.9, 0.8, 0.7], 3) == 1.0

    def test_none_correct(self):
        """正解なしなら 0.0"""
        assert average_precision([False, False], [0.9, 0.8], 2) == 0.0
        assert average_precision([], [], 2) == 0.0

    def test_zero_gt_is_absent(self):
        """GT 0 件は 0 ではなく None"""
        assert average_precision([False], [0.5], 0) is None

    def test_fixed_fixture(self):
        """小さな PR 曲線で手計算値（5/6）と一致し、曲線下面積にも近い"""
        ap = average_precision([True, False, True, False], [0.9, 0.8, 0.7, 0.6], 2)
        assert abs(ap - 5.0 / 6.0) < 1e-12
        area = 0.5 * 1.0 + 0.5 * (2.0 / 3.0)
        assert abs(ap - area) < 0.01

    def test_matches_scalar_oracle(self):
        """ランダムな予測列でスカラー実装と一致する"""
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            hits = list(rng.random(n) < 0.5)
            scores = list(rng.random(n))
            num_gt = max(1, sum(hits) + int(rng.integers(0, 5)))
            assert average_precision(hits, scores, num_gt) == pytest.approx(
                oracle_ap(hits, scores, num_gt), abs=1e-12)

    def test_removing_false_positive_never_lowers_ap(self):
        """FP を1つ取り除いても AP は下がらない"""
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            hits = list(rng.random(n) < 0.5)
            scores = list(rng.random(n))
            num_gt = sum(hits) + 1
            fps = [i for i, h in enumerate(hits) if not h]
            if not fps:
                continue
            drop = fps[int(rng.integers(0, len(fps)))]
            reduced_hits = [h for i, h in enumerate(hits) if i != drop]
            reduced_scores = [s for i, s in enumerate(scores) if i != drop]
            assert (average_precision(reduced_hits, reduced_scores, num_gt)
                    >= average_precision(hits, scores, num_gt) - 1e-12)


class TestEvaluate:
    """評価レポートのテスト"""

    def test_identity_predictions(self, scenes):
        """GT と同一の予測なら全区分の mAP が 1.0"""
        report = evaluate(identity_predictions(scenes), scenes)
        assert report.map_by_tier == {'easy': 1.0, 'moderate': 1.0, 'hard': 1.0}
        assert report.overall_map == 1.0
        assert report.avg == 1.0
        assert report.gt_counts == {'easy': 10, 'moderate': 10, 'hard': 10, 'overall': 30}

    def test_absent_class_tier(self, scenes):
        """GT が無いクラス・区分の AP は None"""
        report = evaluate(identity_predictions(scenes), scenes)
        assert report.ap['car']['easy'] == 1.0
        assert report.ap['car']['moderate'] is None
        assert report.ap['pedestrian']['easy'] is None
        assert report.support['pedestrian']['hard'] == 10

    def test_scores_below_threshold(self, scenes):
        """スコアが閾値以下の予測しかなければ mAP は 0.0"""
        report = evaluate(identity_predictions(scenes, score=0.0), scenes)
        assert report.map_by_tier == {'easy': 0.0, 'moderate': 0.0, 'hard': 0.0}
        assert report.overall_map == 0.0

    def test_avg_is_gt_weighted(self, scenes):
        """Avg は区分 mAP の GT 数加重平均"""
        preds = {s.scene_id: [b.with_score(0.9) for b in s.boxes if b.label != 2] for s in scenes}
        report = evaluate(preds, scenes)
        assert report.map_by_tier['hard'] == 0.0
        assert report.avg == pytest.approx(2.0 / 3.0)

    def test_other_tier_matches_are_ignored(self, scenes):
        """他区分の GT に当たった予測は区分 AP の FP にならない"""
        report = evaluate(identity_predictions(scenes), scenes)
        assert report.pred_counts['easy'] == 10
        assert report.pred_counts['overall'] == 30

    def test_order_invariant(self, scenes):
        """予測リストの順序によらない"""
        rng = np.random.default_rng(8)
        preds = {}
        for s in scenes:
            boxes = [Box3D(b.x + 0.2, b.y, b.z, b.w, b.l, b.h, b.yaw, b.label, float(rng.random()))
                     for b in s.boxes]
            boxes.append(Box3D(30.0, 10.0, 0.75, 1.8, 4.2, 1.5, 0.0, 0, float(rng.random())))
            preds[s.scene_id] = boxes
        shuffled = {k: [v[i] for i in rng.permutation(len(v))] for k, v in reversed(list(preds.items()))}
        assert evaluate(preds, scenes).to_dict() == evaluate(shuffled, scenes).to_dict()

    def test_matches_scalar_oracle(self, scenes):
        """ノイズを加えた予測で overall mAP が素朴な再評価と一致する"""
        rng = np.random.default_rng(9)
        preds = {}
        for s in scenes:
            boxes = []
            for b in s.boxes:
                if rng.random() < 0.8:
                    boxes.append(Box3D(b.x + float(rng.normal(0, 0.5)), b.y + float(rng.normal(0, 0.5)),
                                       b.z, b.w, b.l, b.h, b.yaw, b.label, float(rng.random())))
            boxes.append(Box3D(25.0, -10.0, 0.75, 1.8, 4.2, 1.5, 0.0, int(rng.integers(0, 3)),
                               float(rng.random())))
            preds[s.scene_id] = boxes
        report = evaluate(preds, scenes)
        assert abs(report.overall_map - oracle_overall_map(preds, scenes)) < 1e-9

    def test_unknown_class(self, scenes):
        """未知のクラスIDは EvaluationError"""
        preds = {scenes[0].scene_id: [square(20.0, label=7, score=0.5)]}
        with pytest.raises(EvaluationError):
            evaluate(preds, scenes)

    def test_unknown_scene(self, scenes):
        """評価対象外のシーンの予測は EvaluationError"""
        with pytest.raises(EvaluationError):
            evaluate({'scene_99999': []}, scenes)

    def test_empty_scenes(self):
        """シーンが空なら EvaluationError"""
        with pytest.raises(EvaluationError):
            evaluate({}, [])

    def test_report_rows_and_text(self, scenes):
        """CSV 行はクラス×（3区分 + overall）、要約テキストに Avg を含む"""
        report = evaluate(identity_predictions(scenes), scenes)
        rows = report.to_rows()
        assert len(rows) == 12
        assert set(rows[0]) == {'class', 'tier', 'ap', 'support'}
        assert 'Avg' in report.summary_text()
        assert report.summary_row()['map_avg'] == 1.0

    def test_stats(self, scenes):
        """統計情報に TP / FP が集計される"""
        evaluator = Evaluator()
        evaluator.evaluate(identity_predictions(scenes), scenes)
        stats = evaluator.get_stats()
        assert stats['scenes_evaluated'] == 10
        assert stats['true_positives'] == 30
        assert stats['false_positives'] == 0
        evaluator.reset_stats()
        assert evaluator.get_stats()['predictions'] == 0
