"""
テスト共通フィクスチャ
"""

import numpy as np
import pytest

from src.io.config_manager import deep_merge
from src.io.run_config import build_run_config, default_config
from src.synth.generator import generate_scene_set
from src.tensor.tensor import get_precision, set_precision


@pytest.fixture(autouse=True)
def float64_precision():
    """各テストを 64bit 精度で実行し、終了後に元の精度へ戻す"""
    previous = get_precision()
    set_precision('f64')
    yield
    set_precision(previous)


@pytest.fixture
def rng():
    """テスト用の乱数生成器"""
    return np.random.default_rng(1234)


# テスト用の小さなモデル・データ設定（default_config に重ねる）
TINY_OVERRIDES = {
    'seed': 7,
    'model': {
        'pillar_channels': 4,
        'lidar_channels': 4,
        'camera_channels': 4,
        'backbone_channels': 4,
        'vtransform_channels': 4,
        'fused_channels': 4,
        'head_hidden': 4,
        'heads': 2,
        'attn_downsample': 2,
        'kan': {'grid_size': 3},
        'bev': {'x_min': 0.0, 'x_max': 32.0, 'y_min': -16.0, 'y_max': 16.0, 'cell_size': 2.0,
                'max_pillars': 256, 'max_points_per_pillar': 8},
        'depth': {'d_min': 2.0, 'd_max': 40.0, 'bins': 4},
    },
    'optimizer': {
        'lr': 1.0e-2,
        'batch_size': 2,
        'stage_epochs': [1, 1, 2],
        'toy_factor': 1.0,
    },
    'data': {
        'splits': {'train': 2, 'val': 1},
        'scene_set': {'min_objects': 1, 'max_objects': 2, 'distance_min': 8.0, 'distance_max': 26.0,
                      'azimuth_half_deg': 20.0, 'max_occluders': 1},
        'lidar': {'azimuth_steps': 48, 'elevation_steps': 16},
        'camera': {'channels': 4, 'image_height': 16, 'image_width': 24, 'focal': 12.0},
    },
    'execution': {'max_workers': 1},
}


def tiny_config():
    """小さな設定辞書（検証済みの形）"""
    return deep_merge(default_config(), TINY_OVERRIDES)


@pytest.fixture
def tiny_run_config():
    return build_run_config(tiny_config())


@pytest.fixture(scope='session')
def tiny_samples():
    """小さな設定で生成した3シーン"""
    run = build_run_config(tiny_config())
    return generate_scene_set(run.seed, run.data.scene_set)


@pytest.fixture
def tiny_config_dict():
    return tiny_config()
