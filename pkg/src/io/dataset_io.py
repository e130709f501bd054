"""
データセット入出力モジュール

合成データセットをディレクトリに書き出し、読み戻します。

  <dir>/manifest.yaml                       シード、生成設定、設定ハッシュ、分割
  <dir>/scenes/scene_XXXXX/cloud.kfpc       点群（KFPC）
  <dir>/scenes/scene_XXXXX/camera.kft       カメラ特徴画像（KFT1, float64）
  <dir>/scenes/scene_XXXXX/scene.yaml       GT ボックス、遮蔽物、センサー、箱内点数、遮蔽率

浮動小数は Python の float として YAML に書くため、読み戻しはビット単位で一致します。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import yaml

from src.detection.boxes import Box3D
from src.encoders.camera import CameraModel
from src.encoders.pillars import PointCloud
from src.io.tensor_io import TensorFormatError, load_kfpc, load_kft1, save_kfpc, save_kft1
from src.synth.scene import LidarPose, Scene, SceneSample, SceneSetConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.yaml'
SCENES_DIR = 'scenes'
CLOUD_NAME = 'cloud.kfpc'
CAMERA_NAME = 'camera.kft'
SCENE_NAME = 'scene.yaml'

PathLike = Union[str, Path]


class DatasetError(Exception):
    """データセット読み書きのエラー（該当シーンIDを保持）"""

    def __init__(self, message: str, scene_id: Optional[str] = None):
        self.scene_id = scene_id
        prefix = f"[{scene_id}] " if scene_id else ''
        super().__init__(f"{prefix}{message}")


@dataclass
class Dataset:
    """読み込んだデータセット"""
    root: Path
    manifest: Dict[str, Any]
    samples: List[SceneSample] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.manifest.get('config_hash', '')

    @property
    def scene_set(self) -> SceneSetConfig:
        return SceneSetConfig.from_dict(self.manifest['scene_set'])

    def split(self, name: str) -> List[SceneSample]:
        """
        分割名のサンプル列

        Raises:
            DatasetError: 分割が存在しない、または空
        """
        splits = self.manifest.get('splits', {})
        if name not in splits:
            raise DatasetError(f"分割が見つかりません: {name}（存在する分割: {sorted(splits)}）")
        ids = splits[name]
        if not ids:
            raise DatasetError(f"分割 {name} が空です")
        by_id = {s.scene.scene_id: s for s in self.samples}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DatasetError(f"分割 {name} のシーンが読み込まれていません", scene_id=missing[0])
        return [by_id[i] for i in ids]


def scene_to_dict(scene: Scene) -> Dict[str, Any]:
    return {
        'scene_id': scene.scene_id,
        'seed': int(scene.seed),
        'boxes': [b.to_dict() for b in scene.boxes],
        'occluders': [b.to_dict() for b in scene.occluders],
        'lidar': scene.lidar.to_dict(),
        'camera': scene.camera.to_dict(),
        'point_counts': [int(c) for c in scene.point_counts],
        'occlusion': [float(o) for o in scene.occlusion],
    }


def scene_from_dict(data: Dict[str, Any]) -> Scene:
    return Scene(
        seed=int(data['seed']),
        boxes=[Box3D.from_dict(b) for b in data['boxes']],
        occluders=[Box3D.from_dict(b) for b in data['occluders']],
        lidar=LidarPose.from_dict(data['lidar']),
        camera=CameraModel.from_dict(data['camera']),
        point_counts=[int(c) for c in data['point_counts']],
        occlusion=[float(o) for o in data['occlusion']],
        scene_id=str(data['scene_id']),
    )


def assign_splits(scene_ids: Sequence[str], split_sizes: Dict[str, int]) -> Dict[str, List[str]]:
    """シーンIDを分割サイズの順に先頭から割り当てる"""
    total = sum(split_sizes.values())
    if total != len(scene_ids):
        raise DatasetError(f"分割サイズの合計 {total} がシーン数 {len(scene_ids)} と一致しません")
    splits: Dict[str, List[str]] = {}
    offset = 0
    for name, size in split_sizes.items():
        splits[name] = list(scene_ids[offset:offset + size])
        offset += size
    return splits


def write_dataset(path: PathLike, samples: Sequence[SceneSample], cfg: SceneSetConfig,
                  master_seed: int, split_sizes: Dict[str, int], config_hash: str = '',
                  seeds: Optional[Sequence[int]] = None) -> Path:
    """
    データセットをディレクトリに書き出し

    Args:
        path: 出力ディレクトリ
        samples: シーンサンプル
        cfg: 生成設定（マニフェストに記録）
        master_seed: マスターシード
        split_sizes: 分割名 → シーン数
        config_hash: 設定ハッシュ
        seeds: シーンシード（省略時は各シーンの seed）

    Returns:
        出力ディレクトリ
    """
    root = Path(path)
    ids = [s.scene.scene_id for s in samples]
    if len(set(ids)) != len(ids) or any(not i for i in ids):
        raise DatasetError("シーンIDが空または重複しています")

    manifest = {
        'format_version': FORMAT_VERSION,
        'master_seed': int(master_seed),
        'config_hash': config_hash,
        'hotspot': bool(cfg.hotspot),
        'scene_set': cfg.to_dict(),
        'scenes': [{'id': s.scene.scene_id, 'seed': int(s.scene.seed)} for s in samples],
        'seeds': [int(v) for v in (seeds if seeds is not None else [s.scene.seed for s in samples])],
        'splits': assign_splits(ids, split_sizes),
    }

    try:
        root.mkdir(parents=True, exist_ok=True)
        for sample in samples:
            scene_dir = root / SCENES_DIR / sample.scene.scene_id
            scene_dir.mkdir(parents=True, exist_ok=True)
            save_kfpc(scene_dir / CLOUD_NAME, sample.cloud.points)
            save_kft1(scene_dir / CAMERA_NAME, np.asarray(sample.camera_features, dtype=np.float64))
            with open(scene_dir / SCENE_NAME, 'w', encoding='utf-8') as f:
                yaml.safe_dump(scene_to_dict(sample.scene), f, allow_unicode=True, sort_keys=False)
        with open(root / MANIFEST_NAME, 'w', encoding='utf-8') as f:
            yaml.safe_dump(manifest, f, allow_unicode=True, sort_keys=False)
    except (OSError, TensorFormatError, yaml.YAMLError) as e:
        raise DatasetError(f"データセット書き込みエラー: {e}")

    logger.info(f"データセットを書き出しました: {root}（{len(samples)} シーン）")
    return root


def read_manifest(path: PathLike) -> Dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"マニフェストが見つかりません: {manifest_path}")
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise DatasetError(f"マニフェストの解析に失敗しました: {e}")
    if not isinstance(manifest, dict) or 'scenes' not in manifest:
        raise DatasetError(f"マニフェストが不正です: {manifest_path}")
    return manifest


def read_scene(root: PathLike, scene_id: str) -> SceneSample:
    """
    1シーンを読み込み

    Raises:
        DatasetError: ファイルの欠落・破損（scene_id 付き）
    """
    scene_dir = Path(root) / SCENES_DIR / scene_id
    try:
        with open(scene_dir / SCENE_NAME, 'r', encoding='utf-8') as f:
            scene = scene_from_dict(yaml.safe_load(f))
        cloud = PointCloud(load_kfpc(scene_dir / CLOUD_NAME))
        camera = load_kft1(scene_dir / CAMERA_NAME)
    except FileNotFoundError as e:
        raise DatasetError(f"ファイルが見つかりません: {e.filename}", scene_id=scene_id)
    except TensorFormatError as e:
        raise DatasetError(f"テンソルファイルが破損しています: {e}", scene_id=scene_id)
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"シーン記述が不正です: {e}", scene_id=scene_id)
    if scene.scene_id != scene_id:
        raise DatasetError(f"シーンIDが一致しません: {scene.scene_id}", scene_id=scene_id)
    return SceneSample(scene, cloud, camera)


def read_dataset(path: PathLike, splits: Optional[Sequence[str]] = None) -> Dataset:
    """
    データセットを読み込み

    Args:
        path: データセットディレクトリ
        splits: 読み込む分割（省略時は全シーン）
    """
    root = Path(path)
    manifest = read_manifest(root)
    ids = [entry['id'] for entry in manifest['scenes']]
    if splits is not None:
        wanted = set()
        for name in splits:
            if name not in manifest.get('splits', {}):
                raise DatasetError(f"分割が見つかりません: {name}")
            wanted.update(manifest['splits'][name])
        ids = [i for i in ids if i in wanted]
    samples = [read_scene(root, scene_id) for scene_id in ids]
    logger.info(f"データセットを読み込みました: {root}（{len(samples)} シーン）")
    return Dataset(root, manifest, samples)
