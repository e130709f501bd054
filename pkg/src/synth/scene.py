"""
シーン生成モジュール

路側交差点を模した合成シーン（GT ボックス、ガントリー遮蔽物、LiDAR 姿勢、カメラモデル）を
シードから決定的に生成します。シーンごとのシードはマスターシードから splitmix64 で導出します。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from src.detection.boxes import CLASS_NAMES, Box3D, bev_iou
from src.encoders.camera import CameraModel, DepthBinConfig
from src.encoders.pillars import PillarGridConfig, PointCloud

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# (w, l, h) の平均値 [m]
CLASS_SIZES = {
    0: (1.8, 4.5, 1.6),
    1: (2.5, 9.0, 3.2),
    2: (0.7, 0.7, 1.75),
}
SIZE_JITTER = 0.08
PLACEMENT_MARGIN = 0.5
MAX_PLACEMENT_ATTEMPTS = 50

# 乱数ストリーム番号
STREAM_LAYOUT = 0
STREAM_LIDAR = 1
STREAM_CAMERA = 2


class SynthConfigError(Exception):
    """合成設定のエラー"""
    pass


def splitmix64(state: int) -> int:
    """splitmix64 の出力関数（64bit 整数 → 64bit 整数）"""
    z = state & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seeds(master_seed: int, count: int) -> List[int]:
    """マスターシードから i 番目のシーンのシード splitmix64(master + (i+1)·γ) を導出"""
    return [splitmix64((master_seed + (i + 1) * GOLDEN_GAMMA) & MASK64) for i in range(count)]


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """シーンシードと用途番号から独立した乱数生成器を作る"""
    return np.random.default_rng([seed & MASK64, stream])


@dataclass(frozen=True)
class LidarPose:
    """路側 LiDAR の設置位置と走査パターン"""
    position: Tuple[float, float, float] = (0.0, 0.0, 7.0)
    azimuth_min_deg: float = -50.0
    azimuth_max_deg: float = 50.0
    azimuth_steps: int = 400
    elevation_min_deg: float = -40.0
    elevation_max_deg: float = -1.0
    elevation_steps: int = 64
    max_range: float = 120.0
    noise_sigma: float = 0.02
    ground_returns: bool = False

    def __post_init__(self):
        if self.azimuth_steps < 1 or self.elevation_steps < 1:
            raise SynthConfigError("LiDAR の走査本数は1以上が必要です")
        if self.noise_sigma < 0 or self.max_range <= 0:
            raise SynthConfigError(f"LiDAR 設定が不正です: σ={self.noise_sigma} range={self.max_range}")

    @property
    def num_rays(self) -> int:
        return self.azimuth_steps * self.elevation_steps

    def to_dict(self) -> dict:
        return {
            'position': [float(v) for v in self.position],
            'azimuth_min_deg': self.azimuth_min_deg,
            'azimuth_max_deg': self.azimuth_max_deg,
            'azimuth_steps': self.azimuth_steps,
            'elevation_min_deg': self.elevation_min_deg,
            'elevation_max_deg': self.elevation_max_deg,
            'elevation_steps': self.elevation_steps,
            'max_range': self.max_range,
            'noise_sigma': self.noise_sigma,
            'ground_returns': self.ground_returns,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'LidarPose':
        data = dict(data)
        data['position'] = tuple(data['position'])
        return cls(**data)


@dataclass(frozen=True)
class SceneSetConfig:
    """シーン集合の生成設定"""
    num_scenes: int = 24
    class_probs: Tuple[float, ...] = (0.6, 0.2, 0.2)
    min_objects: int = 4
    max_objects: int = 10
    distance_min: float = 8.0
    distance_max: float = 72.0
    azimuth_half_deg: float = 28.0
    occluder_density: float = 0.5
    max_occluders: int = 2
    hotspot: bool = False
    hotspot_gain: float = 8.0
    background_level: float = 0.1
    camera_noise: float = 0.02
    camera_channels: int = 8
    lidar: LidarPose = field(default_factory=LidarPose)
    image_size: Tuple[int, int] = (64, 96)
    camera_pitch_deg: float = 12.0
    camera_focal: float = 48.0
    depth: DepthBinConfig = field(default_factory=DepthBinConfig)
    bev: PillarGridConfig = field(default_factory=PillarGridConfig)

    def __post_init__(self):
        if self.num_scenes < 0:
            raise SynthConfigError(f"シーン数が負です: {self.num_scenes}")
        probs = np.asarray(self.class_probs, dtype=np.float64)
        if probs.size != len(CLASS_NAMES) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise SynthConfigError(f"クラス確率は {len(CLASS_NAMES)} 個の非負値で合計1が必要です: {self.class_probs}")
        if not (0 <= self.min_objects <= self.max_objects):
            raise SynthConfigError(f"物体数の範囲が不正です: {self.min_objects}〜{self.max_objects}")
        if not (0 < self.distance_min < self.distance_max):
            raise SynthConfigError(f"距離範囲が不正です: {self.distance_min}〜{self.distance_max}")
        if not (0.0 <= self.occluder_density <= 1.0):
            raise SynthConfigError(f"遮蔽物密度は [0, 1] が必要です: {self.occluder_density}")
        if self.camera_noise < 0 or self.background_level < 0 or self.hotspot_gain <= 0:
            raise SynthConfigError("カメラのノイズ・背景・ホットスポット設定が不正です")

    def camera_model(self) -> CameraModel:
        lx, ly, lz = self.lidar.position
        return CameraModel.roadside(height=lz, pitch_deg=self.camera_pitch_deg,
                                    image_size=self.image_size, focal=self.camera_focal,
                                    position_xy=(lx, ly), depth=self.depth)

    def to_dict(self) -> dict:
        return {
            'num_scenes': self.num_scenes,
            'class_probs': [float(p) for p in self.class_probs],
            'min_objects': self.min_objects,
            'max_objects': self.max_objects,
            'distance_min': self.distance_min,
            'distance_max': self.distance_max,
            'azimuth_half_deg': self.azimuth_half_deg,
            'occluder_density': self.occluder_density,
            'max_occluders': self.max_occluders,
            'hotspot': self.hotspot,
            'hotspot_gain': self.hotspot_gain,
            'background_level': self.background_level,
            'camera_noise': self.camera_noise,
            'camera_channels': self.camera_channels,
            'lidar': self.lidar.to_dict(),
            'image_size': list(self.image_size),
            'camera_pitch_deg': self.camera_pitch_deg,
            'camera_focal': self.camera_focal,
            'depth': {'d_min': self.depth.d_min, 'd_max': self.depth.d_max, 'bins': self.depth.bins},
            'bev': self.bev.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SceneSetConfig':
        data = dict(data)
        data['class_probs'] = tuple(data['class_probs'])
        data['image_size'] = tuple(data['image_size'])
        data['lidar'] = LidarPose.from_dict(data['lidar'])
        data['depth'] = DepthBinConfig(**data['depth'])
        data['bev'] = PillarGridConfig(**data['bev'])
        return cls(**data)


@dataclass
class Scene:
    """
    合成シーン

    point_counts と occlusion はレイキャスト後に設定されます。
    """
    seed: int
    boxes: List[Box3D]
    occluders: List[Box3D]
    lidar: LidarPose
    camera: CameraModel
    point_counts: List[int] = field(default_factory=list)
    occlusion: List[float] = field(default_factory=list)
    scene_id: str = ''

    @property
    def num_objects(self) -> int:
        return len(self.boxes)


@dataclass
class SceneSample:
    """シーンとセンサーデータの組"""
    scene: Scene
    cloud: PointCloud
    camera_features: np.ndarray   # (c₀, H, W)


def _inflated(box: Box3D) -> Box3D:
    return Box3D(box.x, box.y, box.z, box.w + PLACEMENT_MARGIN, box.l + PLACEMENT_MARGIN,
                 box.h, box.yaw, box.label)


def _place_occluders(rng: np.random.Generator, cfg: SceneSetConfig) -> List[Box3D]:
    """道路を横断するガントリー梁（z 3.5〜5.5 m）"""
    occluders: List[Box3D] = []
    span = cfg.bev.y_max - cfg.bev.y_min
    for _ in range(cfg.max_occluders):
        if rng.random() >= cfg.occluder_density:
            continue
        x = float(rng.uniform(15.0, 35.0))
        if any(abs(x - o.x) < 4.0 for o in occluders):
            continue
        occluders.append(Box3D(x=x, y=0.0, z=4.5, w=span * 0.5, l=1.0, h=2.0, yaw=0.0, label=-1))
    return occluders


def _sample_box(rng: np.random.Generator, cfg: SceneSetConfig) -> Box3D:
    label = int(rng.choice(len(CLASS_NAMES), p=np.asarray(cfg.class_probs)))
    distance = float(rng.uniform(cfg.distance_min, cfg.distance_max))
    azimuth = math.radians(float(rng.uniform(-cfg.azimuth_half_deg, cfg.azimuth_half_deg)))
    jitter = rng.uniform(1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER, size=3)
    w, l, h = (float(s * j) for s, j in zip(CLASS_SIZES[label], jitter))
    yaw = float(rng.uniform(-math.pi, math.pi))
    lx, ly, _ = cfg.lidar.position
    return Box3D(x=lx + distance * math.cos(azimuth), y=ly + distance * math.sin(azimuth),
                 z=h / 2.0, w=w, l=l, h=h, yaw=yaw, label=label)


def _inside_extent(box: Box3D, bev: PillarGridConfig) -> bool:
    corners = box.bev_corners()
    return bool(np.all(corners[:, 0] >= bev.x_min) and np.all(corners[:, 0] < bev.x_max)
                and np.all(corners[:, 1] >= bev.y_min) and np.all(corners[:, 1] < bev.y_max))


def generate_scene(seed: int, cfg: SceneSetConfig) -> Scene:
    """
    シードからシーンのレイアウトを生成

    物体は LiDAR から 8〜72 m（既定）の距離に一様に置かれ、重なる配置は棄却されます。

    Args:
        seed: シーンシード
        cfg: 生成設定

    Returns:
        Scene（point_counts と occlusion は未設定）
    """
    rng = stream_rng(seed, STREAM_LAYOUT)
    occluders = _place_occluders(rng, cfg)
    target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    boxes: List[Box3D] = []
    for _ in range(target):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            candidate = _sample_box(rng, cfg)
            if not _inside_extent(candidate, cfg.bev):
                continue
            probe = _inflated(candidate)
            if any(bev_iou(probe, _inflated(other)) > 0.0 for other in boxes + occluders):
                continue
            boxes.append(candidate)
            break
    logger.debug(f"シーン生成: seed={seed} 物体={len(boxes)} 遮蔽物={len(occluders)}")
    return Scene(seed=seed, boxes=boxes, occluders=occluders, lidar=cfg.lidar, camera=cfg.camera_model())
