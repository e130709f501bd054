"""
特徴マップ・アテンション可視化モジュール

1シーン分の BEV 特徴を8ビットグレースケール画像として書き出します。

  lidar_bev.png            LiDAR BEV 特徴（チャネル方向の最大値）
  camera_bev.png           カメラ BEV 特徴（閾値超えの強調マスクを重ねる）
  camera_mask.png          強調マスク単体
  attended_camera.png      アテンション後のカメラ寄与
  fused_with_attn.png      融合特徴（アテンションあり）
  fused_without_attn.png   融合特徴（カメラ特徴を直接融合）
  attention_query.png      選択したクエリセルのアテンション重み
  attention.kft            アテンション重み (b, n, S, S)
  vis.yaml                 Gini 集中度、クエリセル、縮小後サイズ
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.io.output_manager import OutputManager
from src.model.network import KanInfraDetModel, prepare_batch
from src.synth.scene import SceneSample
from src.tensor.tensor import no_grad
from src.utils.stats import gini

logger = logging.getLogger(__name__)

HIGHLIGHT_THRESHOLD = 1.5e-3
# 強調マスク外の画素は半分の明るさにする
DIM_FACTOR = 0.5
SIDECAR_NAME = 'vis.yaml'


class VisualizationError(Exception):
    """可視化関連のエラー"""
    pass


@dataclass
class VisResult:
    """可視化結果"""
    scene_id: str
    files: Dict[str, str] = field(default_factory=dict)
    gini: Dict[str, float] = field(default_factory=dict)
    query_cell: Optional[Tuple[int, int]] = None
    attention_spatial: Optional[Tuple[int, int]] = None
    highlight_pixels: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scene': self.scene_id,
            'highlight_threshold': HIGHLIGHT_THRESHOLD,
            'highlight_pixels': self.highlight_pixels,
            'gini': dict(self.gini),
            'attended_more_even': (self.gini['attended_camera'] < self.gini['direct_camera']
                                   if {'attended_camera', 'direct_camera'} <= set(self.gini) else None),
            'query_cell': list(self.query_cell) if self.query_cell else None,
            'attention_spatial': list(self.attention_spatial) if self.attention_spatial else None,
            'files': dict(self.files),
        }


def channel_max(feature: np.ndarray) -> np.ndarray:
    """(c, h, w) または (1, c, h, w) → (h, w)"""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim == 4:
        if feature.shape[0] != 1:
            raise VisualizationError(f"可視化は1サンプルのみ対応しています: {feature.shape}")
        feature = feature[0]
    if feature.ndim != 3:
        raise VisualizationError(f"特徴は (c, h, w) が必要です: {feature.shape}")
    return feature.max(axis=0)


def highlight_mask(values: np.ndarray, threshold: float = HIGHLIGHT_THRESHOLD) -> np.ndarray:
    """値が閾値を超える画素（等号は含まない）"""
    return np.asarray(values) > threshold


def to_uint8(values: np.ndarray) -> np.ndarray:
    """最小値〜最大値を 0〜255 に線形変換（一定値なら全 0）"""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if not np.isfinite(low) or not np.isfinite(high) or high - low <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values - low) / (high - low) * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def overlay_mask(gray: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """マスク画素を白、それ以外を減光"""
    out = np.round(gray.astype(np.float64) * DIM_FACTOR).astype(np.uint8)
    out[mask] = 255
    return out


def contribution_map(feature: np.ndarray) -> np.ndarray:
    """セルごとの寄与（チャネル方向の絶対値和）"""
    feature = np.asarray(feature, dtype=np.float64)
    return np.abs(feature[0] if feature.ndim == 4 else feature).sum(axis=0)


def default_query_cell(lidar: np.ndarray) -> Tuple[int, int]:
    """LiDAR 特徴の大きさが最大のセル (row, col)"""
    magnitude = contribution_map(lidar)
    row, col = np.unravel_index(int(np.argmax(magnitude)), magnitude.shape)
    return int(row), int(col)


def attention_row(weights: np.ndarray, spatial: Tuple[int, int], query_cell: Tuple[int, int],
                  factor: int) -> np.ndarray:
    """
    クエリセルのアテンション重み（ヘッド平均）を縮小後グリッド (h_d, w_d) で返す

    Args:
        weights: (b, n, S, S)
        spatial: (h_d, w_d)
        query_cell: フル解像度の (row, col)
        factor: 縮小率
    """
    h_d, w_d = spatial
    row, col = query_cell[0] // factor, query_cell[1] // factor
    if not (0 <= row < h_d and 0 <= col < w_d):
        raise VisualizationError(f"クエリセル {query_cell} が BEV 範囲外です")
    query = row * w_d + col
    return weights[0, :, query, :].mean(axis=0).reshape(h_d, w_d)


def export_visualization(model: KanInfraDetModel, sample: SceneSample, output: OutputManager,
                         query_cell: Optional[Tuple[int, int]] = None,
                         prefix: str = '') -> VisResult:
    """
    1シーンの特徴マップとアテンション重みを書き出す

    Args:
        model: 学習済みモデル
        sample: 対象シーン
        output: 出力先
        query_cell: アテンション表示のクエリセル (row, col)。省略時は LiDAR 特徴最大のセル
        prefix: 出力ファイル名の接頭ディレクトリ

    Returns:
        VisResult
    """
    model.eval()
    with no_grad():
        batch = prepare_batch([sample], model.config)
        features = model.forward_features(batch)
        fused_direct = model.fuser(features.lidar, features.camera).data

    lidar = features.lidar.data
    camera = features.camera.data
    attended = features.attended.data
    bev = model.config.bev
    result = VisResult(sample.scene.scene_id)

    def save(image: np.ndarray, name: str) -> None:
        path = output.save_image(image, f"{prefix}{name}")
        result.files[name] = str(path)

    camera_max = channel_max(camera)
    mask = highlight_mask(camera_max)
    result.highlight_pixels = int(mask.sum())

    save(to_uint8(channel_max(lidar)), 'lidar_bev.png')
    save(overlay_mask(to_uint8(camera_max), mask), 'camera_bev.png')
    save(mask.astype(np.uint8) * 255, 'camera_mask.png')
    save(to_uint8(channel_max(attended)), 'attended_camera.png')
    save(to_uint8(channel_max(features.fused.data)), 'fused_with_attn.png')
    save(to_uint8(channel_max(fused_direct)), 'fused_without_attn.png')

    result.gini = {
        'lidar': gini(contribution_map(lidar)),
        'direct_camera': gini(contribution_map(camera)),
        'attended_camera': gini(contribution_map(attended)),
        'fused_with_attn': gini(contribution_map(features.fused.data)),
        'fused_without_attn': gini(contribution_map(fused_direct)),
    }

    cross_attn = model.cross_attn
    if cross_attn is None or cross_attn.last_weights is None:
        logger.warning("クロスアテンションが無効のため、アテンション重みは出力しません")
    else:
        if query_cell is None:
            query_cell = default_query_cell(lidar)
        if not (0 <= query_cell[0] < bev.height and 0 <= query_cell[1] < bev.width):
            raise VisualizationError(f"クエリセル {query_cell} が BEV 範囲外です（{bev.height}x{bev.width}）")
        spatial = cross_attn.last_spatial
        row = attention_row(cross_attn.last_weights, spatial, query_cell, cross_attn.factor)
        enlarged = np.kron(row, np.ones((cross_attn.factor, cross_attn.factor)))
        save(to_uint8(enlarged), 'attention_query.png')
        path = output.save_tensor(cross_attn.last_weights, f"{prefix}attention.kft")
        result.files['attention.kft'] = str(path)
        result.query_cell = (int(query_cell[0]), int(query_cell[1]))
        result.attention_spatial = (int(spatial[0]), int(spatial[1]))

    path = output.save_yaml(result.to_dict(), f"{prefix}{SIDECAR_NAME}")
    result.files[SIDECAR_NAME] = str(path)
    logger.info(f"可視化を出力しました: シーン {result.scene_id} "
                f"Gini(直接)={result.gini['direct_camera']:.4f} "
                f"Gini(アテンション後)={result.gini['attended_camera']:.4f}")
    return result
