"""
カメラ特徴描画モジュール

実画像の代わりに c₀ チャネルの特徴画像を直接合成します。
背景テクスチャの上に、可視物体をクラス色のガウスブロブとして描きます。
ホットスポットモードでは、物体と無関係な高輝度ブロブを画像下端付近に1つ加えます。
"""

import logging
import math
from typing import Tuple

import numpy as np

from src.synth.scene import STREAM_CAMERA, Scene, SceneSetConfig, stream_rng

logger = logging.getLogger(__name__)

OBJECT_AMPLITUDE = 1.0
MIN_BLOB_SIGMA = 1.0
HOTSPOT_SIGMA = 2.0


def class_colors(num_classes: int, channels: int) -> np.ndarray:
    """クラスごとのチャネル重み (num_classes, channels)（最終チャネルは共通の物体らしさ）"""
    colors = np.zeros((num_classes, channels))
    for label in range(num_classes):
        colors[label, label % max(channels - 1, 1)] = 1.0
        colors[label, (label + num_classes) % max(channels - 1, 1)] = 0.5
        colors[label, channels - 1] = 0.5
    return colors


def _gaussian_blob(height: int, width: int, center: Tuple[float, float], sigma: float) -> np.ndarray:
    u0, v0 = center
    u = np.arange(width)[None, :]
    v = np.arange(height)[:, None]
    return np.exp(-((u - u0) ** 2 + (v - v0) ** 2) / (2.0 * sigma * sigma))


def render_camera_features(scene: Scene, cfg: SceneSetConfig) -> np.ndarray:
    """
    シーンのカメラ特徴画像を描画

    Args:
        scene: シーン
        cfg: 生成設定（チャネル数、背景、ノイズ、ホットスポット）

    Returns:
        (c₀, H, W) の float64 配列
    """
    cam = scene.camera
    height, width = cam.image_size
    channels = cfg.camera_channels
    rng = stream_rng(scene.seed, STREAM_CAMERA)

    u = np.arange(width)[None, :] / width
    v = np.arange(height)[:, None] / height
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(channels, 2))
    image = np.stack([
        cfg.background_level * 0.5 * (1.0 + np.sin(2 * math.pi * 3 * u + phases[c, 0])
                                      * np.cos(2 * math.pi * 2 * v + phases[c, 1]))
        for c in range(channels)
    ])
    image += rng.normal(0.0, 1.0, size=image.shape) * cfg.camera_noise

    colors = class_colors(len(cfg.class_probs), channels)
    object_layer = np.zeros_like(image)
    if scene.boxes:
        centers = np.array([[b.x, b.y, b.z] for b in scene.boxes])
        uv, depth = cam.project(centers)
        for box, (pu, pv), d in zip(scene.boxes, uv, depth):
            if d <= 0 or not (0 <= pu < width and 0 <= pv < height):
                continue
            sigma = max(MIN_BLOB_SIGMA, cam.intrinsic[0, 0] * max(box.w, box.l) / (4.0 * d))
            blob = OBJECT_AMPLITUDE * _gaussian_blob(height, width, (pu, pv), sigma)
            object_layer = np.maximum(object_layer, colors[box.label][:, None, None] * blob[None])
    image += object_layer

    if cfg.hotspot:
        peak = max(1.0, float(np.abs(object_layer).max()))
        hu = float(rng.uniform(0.2 * width, 0.8 * width))
        hv = float(rng.uniform(height - 8, height - 3))
        blob = cfg.hotspot_gain * peak * _gaussian_blob(height, width, (hu, hv), HOTSPOT_SIGMA)
        image += blob[None]
        logger.debug(f"ホットスポットを追加: seed={scene.seed} 位置=({hu:.1f}, {hv:.1f})")
    return image


def hotspot_region(image_size: Tuple[int, int], margin: int = 8) -> Tuple[slice, slice]:
    """ホットスポットが置かれうる画像下端の領域"""
    height, width = image_size
    return slice(height - margin - 3, height), slice(0, width)
