"""
シーン集合生成モジュール

レイアウト生成 → レイキャスト → カメラ特徴描画をシーンごとに行います。
シーンは互いに独立なので、ワーカープールで並列に生成します。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

from src.synth.camera_render import render_camera_features
from src.synth.lidar import raycast_lidar
from src.synth.scene import SceneSample, SceneSetConfig, derive_seeds, generate_scene

logger = logging.getLogger(__name__)


def scene_id_for(index: int) -> str:
    return f"scene_{index:05d}"


def synthesize_sample(seed: int, cfg: SceneSetConfig, scene_id: str = '') -> SceneSample:
    """1シーン分のサンプルを生成"""
    scene = generate_scene(seed, cfg)
    scene.scene_id = scene_id
    cloud = raycast_lidar(scene)
    image = render_camera_features(scene, cfg)
    return SceneSample(scene, cloud, image)


def generate_scene_set(master_seed: int, cfg: SceneSetConfig,
                       max_workers: Optional[int] = None) -> List[SceneSample]:
    """
    シーン集合を生成

    Args:
        master_seed: マスターシード
        cfg: 生成設定
        max_workers: ワーカー数（省略時は1）

    Returns:
        導出シード順のサンプル列（ワーカー数に依存しない）
    """
    seeds = derive_seeds(master_seed, cfg.num_scenes)
    if not seeds:
        return []
    workers = max(1, min(max_workers or 1, len(seeds)))
    logger.info(f"シーン集合を生成します: {len(seeds)} シーン（ワーカー数: {workers}）")

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(synthesize_sample, seed, cfg, scene_id_for(i))
                   for i, seed in enumerate(seeds)]
        samples = [future.result() for future in futures]

    total_objects = sum(s.scene.num_objects for s in samples)
    logger.info(f"シーン集合の生成が完了しました: 物体数={total_objects}")
    return samples
