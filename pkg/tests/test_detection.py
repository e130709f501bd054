"""
detection パッケージ（ボックス・ヘッド・損失・復元）のユニットテスト
"""

import math

import numpy as np
import pytest

from src.detection.boxes import Box3D, DegenerateBoxError, bev_iou, nms, normalize_yaw
from src.detection.decode import decode, encode_head_output
from src.detection.head import DetectionHead, HeadOutput, HeadShapeError
from src.detection.loss import build_targets, detection_loss
from src.encoders.pillars import PillarGridConfig
from src.tensor.tensor import Tensor, no_grad


@pytest.fixture
def bev():
    """32m × 32m、セル 1m の BEV"""
    return PillarGridConfig(x_min=0.0, x_max=32.0, y_min=-16.0, y_max=16.0, cell_size=1.0)


@pytest.fixture
def scene_boxes():
    """離れて置かれた3クラスのボックス"""
    return [
        Box3D(5.3, -4.7, 0.8, 1.8, 4.2, 1.5, 0.3, label=0),
        Box3D(20.6, 7.2, 1.0, 0.6, 0.8, 1.7, -2.0, label=2),
        Box3D(12.1, 10.4, 1.6, 2.5, 8.0, 3.0, 3.0, label=1),
    ]


def zero_head(in_channels, num_classes=3):
    head = DetectionHead(in_channels, num_classes, hidden=4)
    for param in head.parameters():
        param.data = np.zeros_like(param.data)
    return head


class TestBoxes:
    """Box3D と BEV IoU"""

    def test_degenerate_box_rejected(self):
        """サイズ 0 のボックスはエラーになること"""
        with pytest.raises(DegenerateBoxError):
            Box3D(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0)

    def test_normalize_yaw_range(self):
        """ヨー角が (−π, π] に収まること"""
        assert normalize_yaw(-math.pi) == pytest.approx(math.pi)
        assert normalize_yaw(3 * math.pi / 2) == pytest.approx(-math.pi / 2)

    def test_identical_and_disjoint(self):
        """同一ボックスは 1、離れたボックスは 0 になること"""
        box = Box3D(1.0, 2.0, 0.0, 2.0, 4.0, 1.5, 0.7)
        assert bev_iou(box, box) == pytest.approx(1.0)
        assert bev_iou(box, Box3D(50.0, 2.0, 0.0, 2.0, 4.0, 1.5, 0.7)) == 0.0

    def test_bev_corners_and_polygon(self):
        """4隅が中心まわりに並び、多角形の面積が w×l になること"""
        box = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
        corners = box.bev_corners()
        assert corners.shape == (4, 2)
        np.testing.assert_allclose(corners.mean(axis=0), [0.0, 0.0], atol=1e-12)
        assert box.polygon().area == pytest.approx(4.0)
        assert bev_iou(box, Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)) == pytest.approx(1.0)

    def test_offset_squares(self):
        """1m ずらした 2m 四方の IoU が 1/3 になること"""
        a = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
        b = Box3D(1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
        assert bev_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_offset_squares_monte_carlo(self, rng):
        """IoU がモンテカルロ推定と一致すること"""
        a = Box3D(0.0, 0.0, 0.0, 2.0, 3.0, 1.0, 0.4)
        b = Box3D(0.8, 0.5, 0.0, 1.5, 2.5, 1.0, -0.3)
        points = np.column_stack([rng.uniform(-3, 4, 400000), rng.uniform(-3, 4, 400000), np.zeros(400000)])
        in_a, in_b = a.contains(points), b.contains(points)
        estimate = (in_a & in_b).sum() / (in_a | in_b).sum()
        assert bev_iou(a, b) == pytest.approx(estimate, abs=5e-3)

    def test_symmetric_and_rotation_equivariant(self, rng):
        """IoU が対称で、両方を回転しても変わらないこと"""
        for _ in range(10):
            a = Box3D(*rng.uniform(-2, 2, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-3, 3))
            b = Box3D(*rng.uniform(-2, 2, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-3, 3))
            theta = rng.uniform(-math.pi, math.pi)
            c, s = math.cos(theta), math.sin(theta)

            def rotate(box):
                return Box3D(c * box.x - s * box.y, s * box.x + c * box.y, box.z,
                             box.w, box.l, box.h, normalize_yaw(box.yaw + theta))

            iou = bev_iou(a, b)
            assert 0.0 <= iou <= 1.0
            assert iou == pytest.approx(bev_iou(b, a), abs=1e-12)
            assert iou == pytest.approx(bev_iou(rotate(a), rotate(b)), abs=1e-9)

    def test_dict_round_trip(self):
        """辞書表現から同じボックスが復元されること"""
        box = Box3D(1.0, 2.0, 3.0, 1.0, 2.0, 1.5, 0.1, label=2, score=0.75)
        assert Box3D.from_dict(box.to_dict()) == box


class TestNms:
    """貪欲 NMS"""

    def test_identical_boxes_keep_one(self):
        """同一位置の2ボックスは1つだけ残ること"""
        a = Box3D(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0, score=0.9)
        kept = nms([a.with_score(0.4), a], 0.5)
        assert kept == [a]

    def test_other_class_not_suppressed(self):
        """クラスが異なれば抑制しないこと"""
        a = Box3D(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0, label=0, score=0.9)
        b = Box3D(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0, label=1, score=0.8)
        assert len(nms([a, b], 0.5)) == 2

    def test_matches_pairwise_definition(self, rng):
        """残りは互いに閾値以下、除かれたボックスは上位の残りと閾値超えで重なること"""
        boxes = [Box3D(*rng.uniform(0, 6, 2), 0.0, *rng.uniform(1, 3, 3), rng.uniform(-3, 3),
                       label=int(rng.integers(0, 2)), score=float(rng.uniform()))
                 for _ in range(40)]
        kept = nms(boxes, 0.3)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert a.label != b.label or bev_iou(a, b) <= 0.3
        for box in boxes:
            if box in kept:
                continue
            assert any(k.label == box.label and k.score >= box.score and bev_iou(k, box) > 0.3 for k in kept)


class TestHead:
    """検出ヘッド"""

    def test_zero_weights_give_half(self, rng):
        """重みが全て 0 ならヒートマップは 0.5 になること"""
        head = zero_head(3)
        out = head(Tensor(rng.normal(size=(2, 3, 5, 7))))
        np.testing.assert_array_equal(out.heatmap.data, np.full((2, 3, 5, 7), 0.5))
        assert out.regression.shape == (2, 8, 5, 7)

    def test_deterministic_given_seed(self, rng):
        """同じシードの重みなら出力が一致すること"""
        x = Tensor(rng.normal(size=(1, 4, 6, 6)))
        a = DetectionHead(4, 3, hidden=5, rng=np.random.default_rng(3))(x)
        b = DetectionHead(4, 3, hidden=5, rng=np.random.default_rng(3))(x)
        np.testing.assert_array_equal(a.heatmap.data, b.heatmap.data)
        np.testing.assert_array_equal(a.regression.data, b.regression.data)
        assert np.all((a.heatmap.data > 0) & (a.heatmap.data < 1))

    def test_channel_mismatch(self, rng):
        """入力チャネル数の不一致はエラーになること"""
        with pytest.raises(HeadShapeError):
            DetectionHead(4, 3, hidden=5, rng=rng)(Tensor(np.zeros((1, 3, 4, 4))))

    def test_head_output_requires_eight_channels(self):
        """回帰マップが 8 チャネルでなければエラーになること"""
        with pytest.raises(HeadShapeError):
            HeadOutput(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 7, 2, 2))))


class TestDetectionLoss:
    """検出損失"""

    def test_one_hot_perfect_prediction(self, bev, scene_boxes):
        """GT 中心に1点のヒートマップと正確な回帰なら損失はほぼ 0 になること"""
        encoded = encode_head_output(scene_boxes, bev)
        one_hot = (encoded.heatmap.data == 1.0).astype(np.float64)
        loss = detection_loss(HeadOutput(Tensor(one_hot), encoded.regression), scene_boxes, bev)
        assert 0.0 <= loss.item() < 1e-3

    def test_empty_scene_background(self, bev):
        """空のシーンで背景ほぼ 0 なら損失はほぼ 0、回帰項は 0 になること"""
        pred = HeadOutput(Tensor(np.full((1, 3, bev.height, bev.width), 1e-4)),
                          Tensor(np.zeros((1, 8, bev.height, bev.width))))
        loss, terms = detection_loss(pred, [], bev, return_terms=True)
        assert terms['reg'] == 0.0
        assert terms['num_pos'] == 0
        assert 0.0 <= loss.item() < 1e-3

    def test_matches_scalar_loop(self, bev, scene_boxes, rng):
        """ゼロ重みヘッドの損失がスカラーループの計算と一致すること"""
        head = zero_head(2)
        with no_grad():
            pred = head(Tensor(rng.normal(size=(1, 2, bev.height, bev.width))))
        loss = detection_loss(pred, scene_boxes, bev).item()

        targets = build_targets([scene_boxes], bev, 3)
        heat = pred.heatmap.data[0]
        focal, num_pos = 0.0, 0
        for c in range(3):
            for iy in range(bev.height):
                for ix in range(bev.width):
                    p = min(max(heat[c, iy, ix], 1e-4), 1 - 1e-4)
                    t = targets.heatmap[0, c, iy, ix]
                    if t == 1.0:
                        num_pos += 1
                        focal -= math.log(p) * (1 - p) ** 2
                    else:
                        focal -= (1 - t) ** 4 * p ** 2 * math.log(1 - p)
        reg = 0.0
        for flat, target in zip(targets.indices, targets.regression):
            iy, ix = divmod(int(flat), bev.width)
            for k in range(8):
                reg += abs(pred.regression.data[0, k, iy, ix] - target[k])
        expected = focal / max(num_pos, 1) + 0.25 * reg / (len(targets.indices) * 8)
        assert loss == pytest.approx(expected, abs=1e-8)

    def test_gradient_flows_to_head(self, bev, scene_boxes, rng):
        """損失の勾配がヘッドのパラメータに届くこと"""
        head = DetectionHead(2, 3, hidden=4, rng=rng)
        pred = head(Tensor(rng.normal(size=(1, 2, bev.height, bev.width))))
        loss = detection_loss(pred, scene_boxes, bev)
        assert loss.item() > 0
        loss.backward()
        assert all(p.grad is not None for p in head.parameters())

    def test_batch_size_mismatch(self, bev, scene_boxes):
        """GT サンプル数とバッチ数の不一致はエラーになること"""
        encoded = encode_head_output(scene_boxes, bev)
        with pytest.raises(HeadShapeError):
            detection_loss(encoded, [scene_boxes, scene_boxes], bev)


class TestDecode:
    """ボックス復元"""

    def test_encode_decode_round_trip(self, bev, scene_boxes):
        """GT から作った HeadOutput を復元すると中心・サイズ・向きが戻ること"""
        decoded = decode(encode_head_output(scene_boxes, bev), bev, score_thresh=0.5)
        assert len(decoded) == len(scene_boxes)
        for box in scene_boxes:
            match = [d for d in decoded if d.label == box.label]
            assert len(match) == 1
            found = match[0]
            assert abs(found.x - box.x) <= bev.cell_size / 2
            assert abs(found.y - box.y) <= bev.cell_size / 2
            for attr in ('w', 'l', 'h'):
                assert getattr(found, attr) == pytest.approx(getattr(box, attr), rel=1e-6)
            assert math.cos(found.yaw - box.yaw) == pytest.approx(1.0, abs=1e-9)

    def test_single_peak(self, bev):
        """孤立したピーク1つから解析的な位置のボックスが1つ得られること"""
        heat = np.zeros((1, 3, bev.height, bev.width))
        heat[0, 1, 10, 4] = 0.8
        reg = np.zeros((1, 8, bev.height, bev.width))
        reg[0, :, 10, 4] = [0.25, 0.75, 1.2, 0.0, math.log(2.0), 0.0, 0.0, 1.0]
        boxes = decode(HeadOutput(Tensor(heat), Tensor(reg)), bev)
        assert len(boxes) == 1
        box = boxes[0]
        assert (box.x, box.y) == pytest.approx((4.25, -16.0 + 10.75))
        assert (box.w, box.l, box.h) == pytest.approx((1.0, 2.0, 1.0))
        assert box.yaw == pytest.approx(0.0)
        assert box.label == 1 and box.score == pytest.approx(0.8)

    def test_below_threshold_gives_nothing(self, bev):
        """閾値以下のヒートマップからは何も復元されないこと"""
        heat = np.full((1, 3, bev.height, bev.width), 0.05)
        reg = np.zeros((1, 8, bev.height, bev.width))
        assert decode(HeadOutput(Tensor(heat), Tensor(reg)), bev, score_thresh=0.1) == []

    def test_invalid_threshold(self, bev, scene_boxes):
        """範囲外の閾値はエラーになること"""
        with pytest.raises(ValueError):
            decode(encode_head_output(scene_boxes, bev), bev, score_thresh=1.5)
