"""
合成データモジュール

路側交差点の合成シーン、LiDAR レイキャスト、カメラ特徴描画を提供。
"""

from src.synth.scene import (
    LidarPose,
    Scene,
    SceneSample,
    SceneSetConfig,
    SynthConfigError,
    derive_seeds,
    generate_scene,
    splitmix64,
)
from src.synth.lidar import RaycastResult, raycast, raycast_lidar
from src.synth.camera_render import render_camera_features
from src.synth.generator import generate_scene_set, synthesize_sample

__all__ = [
    'LidarPose',
    'Scene',
    'SceneSample',
    'SceneSetConfig',
    'SynthConfigError',
    'derive_seeds',
    'generate_scene',
    'splitmix64',
    'RaycastResult',
    'raycast',
    'raycast_lidar',
    'render_camera_features',
    'generate_scene_set',
    'synthesize_sample',
]
