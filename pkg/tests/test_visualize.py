"""
特徴マップ・アテンション可視化のユニットテスト
"""

from dataclasses import replace

import numpy as np
import pytest
import yaml
from PIL import Image

from src.io.output_manager import OutputManager
from src.io.run_config import AblationToggles
from src.io.tensor_io import load_kft1
from src.model.network import KanInfraDetModel, build_model
from src.model.visualize import (
    HIGHLIGHT_THRESHOLD,
    SIDECAR_NAME,
    VisualizationError,
    attention_row,
    channel_max,
    default_query_cell,
    export_visualization,
    highlight_mask,
    overlay_mask,
    to_uint8,
)
from src.synth.generator import generate_scene_set

EXPECTED_IMAGES = ('lidar_bev.png', 'camera_bev.png', 'camera_mask.png', 'attended_camera.png',
                   'fused_with_attn.png', 'fused_without_attn.png', 'attention_query.png')


class TestImageHelpers:
    """画像変換ヘルパーのテスト"""

    def test_to_uint8_range(self):
        """最小値が 0、最大値が 255 になる"""
        image = to_uint8(np.array([[-1.0, 0.0], [1.0, 3.0]]))
        assert image.dtype == np.uint8
        assert image.min() == 0
        assert image.max() == 255

    def test_to_uint8_constant(self):
        """一定値なら全 0"""
        assert not to_uint8(np.full((2, 2), 5.0)).any()

    def test_highlight_strictly_above_threshold(self):
        """閾値ちょうどは強調しない"""
        mask = highlight_mask(np.array([HIGHLIGHT_THRESHOLD, HIGHLIGHT_THRESHOLD * 2, 0.0]))
        assert mask.tolist() == [False, True, False]

    def test_overlay_dims_unmasked(self):
        """マスク画素は白、それ以外は半分の明るさ"""
        gray = np.array([[200, 100]], dtype=np.uint8)
        out = overlay_mask(gray, np.array([[True, False]]))
        assert out.tolist() == [[255, 50]]

    def test_channel_max(self):
        """チャネル方向の最大値、複数サンプルは拒否"""
        feature = np.zeros((1, 2, 3, 3))
        feature[0, 1, 2, 2] = 4.0
        assert channel_max(feature)[2, 2] == 4.0
        with pytest.raises(VisualizationError):
            channel_max(np.zeros((2, 2, 3, 3)))

    def test_default_query_cell(self):
        """LiDAR 特徴の大きさが最大のセル"""
        lidar = np.zeros((1, 2, 4, 5))
        lidar[0, 0, 3, 1] = -2.0
        assert default_query_cell(lidar) == (3, 1)

    def test_attention_row_head_mean(self):
        """クエリ行をヘッド平均して縮小グリッドに並べる"""
        weights = np.zeros((1, 2, 4, 4))
        weights[0, 0, 1, :] = [1.0, 0.0, 0.0, 0.0]
        weights[0, 1, 1, :] = [0.0, 0.0, 0.0, 1.0]
        row = attention_row(weights, (2, 2), query_cell=(0, 2), factor=2)
        np.testing.assert_allclose(row, [[0.5, 0.0], [0.0, 0.5]])
        with pytest.raises(VisualizationError):
            attention_row(weights, (2, 2), query_cell=(4, 0), factor=2)


class TestExportVisualization:
    """可視化出力のテスト"""

    def test_exports_all_files(self, tmp_path, tiny_run_config, tiny_samples):
        """画像・アテンション重み・サイドカーを書き出す"""
        model = build_model(tiny_run_config)
        result = export_visualization(model, tiny_samples[0], OutputManager(tmp_path))

        for name in EXPECTED_IMAGES:
            with Image.open(tmp_path / name) as image:
                assert image.mode == 'L'
                assert image.size == (16, 16)
        weights = load_kft1(tmp_path / 'attention.kft')
        assert weights.shape == (1, 2, 64, 64)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)

        with open(tmp_path / SIDECAR_NAME, encoding='utf-8') as f:
            sidecar = yaml.safe_load(f)
        assert sidecar['scene'] == tiny_samples[0].scene.scene_id
        assert sidecar['attention_spatial'] == [8, 8]
        assert set(sidecar['gini']) == {'lidar', 'direct_camera', 'attended_camera',
                                        'fused_with_attn', 'fused_without_attn'}
        assert all(0.0 <= v <= 1.0 for v in result.gini.values())

    def test_explicit_query_cell(self, tmp_path, tiny_run_config, tiny_samples):
        """指定したクエリセルが記録され、範囲外は VisualizationError"""
        model = build_model(tiny_run_config)
        result = export_visualization(model, tiny_samples[0], OutputManager(tmp_path), query_cell=(3, 5))
        assert result.query_cell == (3, 5)
        with pytest.raises(VisualizationError):
            export_visualization(model, tiny_samples[0], OutputManager(tmp_path), query_cell=(16, 0))

    def test_without_cross_attention(self, tmp_path, tiny_run_config, tiny_samples):
        """クロスアテンションが無効ならアテンション関連は出力しない"""
        model = KanInfraDetModel(tiny_run_config.model, AblationToggles.preset('baseline'))
        result = export_visualization(model, tiny_samples[0], OutputManager(tmp_path), prefix='baseline/')
        assert (tmp_path / 'baseline' / 'camera_bev.png').exists()
        assert not (tmp_path / 'baseline' / 'attention.kft').exists()
        assert result.query_cell is None


@pytest.fixture
def hotspot_samples(tiny_run_config):
    """カメラ画像にホットスポットを入れた小さなシーン集合"""
    return generate_scene_set(tiny_run_config.seed, replace(tiny_run_config.data.scene_set, hotspot=True))


class TestFeatureSpread:
    """ホットスポットのあるシーンでのカメラ寄与の集中度"""

    def test_attended_camera_more_even(self, tmp_path, tiny_run_config, hotspot_samples):
        """アテンション後のカメラ寄与は直接融合より Gini が小さい"""
        model = build_model(tiny_run_config)
        for i, sample in enumerate(hotspot_samples):
            result = export_visualization(model, sample, OutputManager(tmp_path), prefix=f"s{i}/")
            assert result.gini['attended_camera'] < result.gini['direct_camera']
            with open(tmp_path / f"s{i}" / SIDECAR_NAME, encoding='utf-8') as f:
                assert yaml.safe_load(f)['attended_more_even'] is True

    def test_uniform_attention_spreads_evenly(self, tmp_path, tiny_run_config, hotspot_samples):
        """クエリ射影が 0 なら全セルに同じ平均が配られ、Gini はほぼ 0"""
        model = build_model(tiny_run_config)
        model.cross_attn.attention.wq.data = np.zeros_like(model.cross_attn.attention.wq.data)
        result = export_visualization(model, hotspot_samples[0], OutputManager(tmp_path))
        assert result.gini['attended_camera'] < 1e-9
        assert result.gini['direct_camera'] > 0.0
