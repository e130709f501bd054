"""
実行設定モジュール

検証済みの設定辞書を型付きのデータクラス（RunConfig）へ変換します。
既定値（DEFAULT_CONFIG）とアブレーションプリセットもここで定義します。
"""

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Tuple

from src.encoders.camera import DepthBinConfig
from src.encoders.pillars import PillarGridConfig
from src.kan.spline import SplineGrid
from src.synth.scene import LidarPose, SceneSetConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    'seed': 0,
    'model': {
        'pillar_channels': 32,
        # CPU 向けの縮小既定値（フル構成の2段目 PFN は 64）
        'lidar_channels': 16,
        'camera_channels': 16,
        'backbone_channels': 16,
        'vtransform_channels': 16,
        'fused_channels': 16,
        'head_hidden': 16,
        'num_classes': 3,
        'heads': 2,
        'attn_downsample': 6,
        'kan': {
            'grid_size': 5,
            'spline_order': 3,
            'grid_min': -1.0,
            'grid_max': 1.0,
        },
        'bev': {
            'x_min': 0.0,
            'x_max': 76.8,
            'y_min': -38.4,
            'y_max': 38.4,
            'cell_size': 0.8,
            'max_pillars': 4096,
            'max_points_per_pillar': 32,
        },
        'depth': {
            'd_min': 2.0,
            'd_max': 80.0,
            'bins': 32,
        },
    },
    'optimizer': {
        'lr': 1.0e-4,
        'weight_decay': 0.01,
        'warmup_ratio': 0.3,
        'warmup_fraction': 0.1,
        'betas': [0.9, 0.999],
        'eps': 1.0e-8,
        'min_lr': 0.0,
        'batch_size': 4,
        'stage_epochs': [20, 20, 60],
        'toy_factor': 0.25,
    },
    'data': {
        'dataset_dir': './output/dataset',
        'splits': {
            'train': 20,
            'val': 4,
        },
        'scene_set': {
            'class_probs': [0.6, 0.2, 0.2],
            'min_objects': 4,
            'max_objects': 10,
            'distance_min': 8.0,
            'distance_max': 72.0,
            'azimuth_half_deg': 28.0,
            'occluder_density': 0.5,
            'max_occluders': 2,
            'hotspot': False,
            'hotspot_gain': 8.0,
            'background_level': 0.1,
            'camera_noise': 0.02,
        },
        'lidar': {
            'height': 7.0,
            'azimuth_min_deg': -50.0,
            'azimuth_max_deg': 50.0,
            'azimuth_steps': 400,
            'elevation_min_deg': -40.0,
            'elevation_max_deg': -1.0,
            'elevation_steps': 64,
            'max_range': 120.0,
            'noise_sigma': 0.02,
            'ground_returns': False,
        },
        'camera': {
            'channels': 8,
            'image_height': 64,
            'image_width': 96,
            'pitch_deg': 12.0,
            'focal': 48.0,
        },
    },
    'ablation': {
        'preset': None,
        'use_kan_point_encoder': True,
        'use_kanv_transform': True,
        'use_conv_kan_fuser': True,
        'use_cross_attn': True,
    },
    'evaluation': {
        'split': 'val',
        'iou_threshold': 0.5,
        'score_thresh': 0.0,
        'decode_score_thresh': 0.1,
        'nms_iou': 0.5,
        'occlusion_threshold': 0.1,
    },
    'execution': {
        'precision': 'f64',
        'max_workers': 4,
        'gradcheck_tolerance': 1.0e-5,
    },
    'output': {
        'dir': './output',
        'log_file': './logs/kanfuse.log',
    },
    'logging': {
        'level': 'INFO',
        'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    },
}

TOGGLE_KEYS = ('use_kan_point_encoder', 'use_kanv_transform', 'use_conv_kan_fuser', 'use_cross_attn')

ABLATION_PRESETS: Dict[str, Dict[str, bool]] = {
    'baseline': dict.fromkeys(TOGGLE_KEYS, False),
    'point_encoder': {**dict.fromkeys(TOGGLE_KEYS, False), 'use_kan_point_encoder': True},
    'vtransform_fuser': {**dict.fromkeys(TOGGLE_KEYS, False),
                         'use_kanv_transform': True, 'use_conv_kan_fuser': True},
    'cross_attn': {**dict.fromkeys(TOGGLE_KEYS, False), 'use_cross_attn': True},
    'full': dict.fromkeys(TOGGLE_KEYS, True),
}


def default_config() -> Dict[str, Any]:
    return copy.deepcopy(DEFAULT_CONFIG)


# 結果に影響しないセクションはハッシュに含めない
HASH_EXCLUDED_SECTIONS = ('output', 'logging', 'execution', 'evaluation')


def _digest(obj: Any) -> str:
    canonical = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def config_hash(config: Dict[str, Any]) -> str:
    """
    設定辞書の正規化 JSON（キー順）の sha256

    出力先・ログ・実行環境・評価の設定と data.dataset_dir は含めません。
    """
    hashed = {key: value for key, value in config.items() if key not in HASH_EXCLUDED_SECTIONS}
    if 'data' in hashed:
        hashed['data'] = {k: v for k, v in hashed['data'].items() if k != 'dataset_dir'}
    return _digest(hashed)


def dataset_hash(config: Dict[str, Any]) -> str:
    """データセット生成に効く設定（seed, data, model.bev, model.depth）のハッシュ"""
    data = {k: v for k, v in config['data'].items() if k != 'dataset_dir'}
    return _digest({
        'seed': config['seed'],
        'data': data,
        'bev': config['model']['bev'],
        'depth': config['model']['depth'],
    })


@dataclass(frozen=True)
class ModelConfig:
    pillar_channels: int = 32
    lidar_channels: int = 16
    camera_channels: int = 16
    backbone_channels: int = 16
    vtransform_channels: int = 16
    fused_channels: int = 16
    head_hidden: int = 16
    num_classes: int = 3
    heads: int = 2
    attn_downsample: int = 6
    image_channels: int = 8
    grid: SplineGrid = field(default_factory=SplineGrid)
    bev: PillarGridConfig = field(default_factory=PillarGridConfig)
    depth: DepthBinConfig = field(default_factory=DepthBinConfig)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.3
    warmup_fraction: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    min_lr: float = 0.0
    batch_size: int = 4
    stage_epochs: Tuple[int, int, int] = (20, 20, 60)
    toy_factor: float = 0.25

    @property
    def scaled_epochs(self) -> Tuple[int, ...]:
        """トイ係数を掛けたステージごとのエポック数"""
        return tuple(int(round(e * self.toy_factor)) for e in self.stage_epochs)


@dataclass(frozen=True)
class DataConfig:
    dataset_dir: str = './output/dataset'
    splits: Tuple[Tuple[str, int], ...] = (('train', 20), ('val', 4))
    scene_set: SceneSetConfig = field(default_factory=SceneSetConfig)

    @property
    def split_sizes(self) -> Dict[str, int]:
        return dict(self.splits)


@dataclass(frozen=True)
class AblationToggles:
    """4つのモジュール切り替え（すべて無効でベースライン）"""
    use_kan_point_encoder: bool = True
    use_kanv_transform: bool = True
    use_conv_kan_fuser: bool = True
    use_cross_attn: bool = True

    @classmethod
    def preset(cls, name: str) -> 'AblationToggles':
        if name not in ABLATION_PRESETS:
            raise KeyError(f"未知のアブレーションプリセットです: {name}（選択肢: {sorted(ABLATION_PRESETS)}）")
        return cls(**ABLATION_PRESETS[name])

    def to_dict(self) -> Dict[str, bool]:
        return asdict(self)


@dataclass(frozen=True)
class EvaluationConfig:
    split: str = 'val'
    iou_threshold: float = 0.5
    score_thresh: float = 0.0
    decode_score_thresh: float = 0.1
    nms_iou: float = 0.5
    occlusion_threshold: float = 0.1


@dataclass(frozen=True)
class ExecutionConfig:
    precision: str = 'f64'
    max_workers: int = 4
    gradcheck_tolerance: float = 1e-5


@dataclass(frozen=True)
class RunConfig:
    """型付きの実行設定"""
    model: ModelConfig
    optimizer: OptimizerConfig
    data: DataConfig
    ablation: AblationToggles
    evaluation: EvaluationConfig
    execution: ExecutionConfig
    seed: int
    output_dir: str
    config_hash: str
    dataset_hash: str


def build_scene_set_config(config: Dict[str, Any]) -> SceneSetConfig:
    """data / model セクションから SceneSetConfig を組み立てる"""
    data, model = config['data'], config['model']
    scene, lidar, camera = data['scene_set'], data['lidar'], data['camera']
    pose = LidarPose(
        position=(0.0, 0.0, float(lidar['height'])),
        azimuth_min_deg=float(lidar['azimuth_min_deg']),
        azimuth_max_deg=float(lidar['azimuth_max_deg']),
        azimuth_steps=int(lidar['azimuth_steps']),
        elevation_min_deg=float(lidar['elevation_min_deg']),
        elevation_max_deg=float(lidar['elevation_max_deg']),
        elevation_steps=int(lidar['elevation_steps']),
        max_range=float(lidar['max_range']),
        noise_sigma=float(lidar['noise_sigma']),
        ground_returns=bool(lidar['ground_returns']),
    )
    return SceneSetConfig(
        num_scenes=int(sum(data['splits'].values())),
        class_probs=tuple(float(p) for p in scene['class_probs']),
        min_objects=int(scene['min_objects']),
        max_objects=int(scene['max_objects']),
        distance_min=float(scene['distance_min']),
        distance_max=float(scene['distance_max']),
        azimuth_half_deg=float(scene['azimuth_half_deg']),
        occluder_density=float(scene['occluder_density']),
        max_occluders=int(scene['max_occluders']),
        hotspot=bool(scene['hotspot']),
        hotspot_gain=float(scene['hotspot_gain']),
        background_level=float(scene['background_level']),
        camera_noise=float(scene['camera_noise']),
        camera_channels=int(camera['channels']),
        lidar=pose,
        image_size=(int(camera['image_height']), int(camera['image_width'])),
        camera_pitch_deg=float(camera['pitch_deg']),
        camera_focal=float(camera['focal']),
        depth=DepthBinConfig(**model['depth']),
        bev=PillarGridConfig(**model['bev']),
    )


def build_run_config(config: Dict[str, Any]) -> RunConfig:
    """検証済み設定辞書 → RunConfig"""
    model, opt = config['model'], config['optimizer']
    kan = model['kan']
    ablation = dict(config['ablation'])
    preset = ablation.pop('preset', None)
    toggles = AblationToggles.preset(preset) if preset else AblationToggles(**ablation)

    model_config = ModelConfig(
        pillar_channels=model['pillar_channels'],
        lidar_channels=model['lidar_channels'],
        camera_channels=model['camera_channels'],
        backbone_channels=model['backbone_channels'],
        vtransform_channels=model['vtransform_channels'],
        fused_channels=model['fused_channels'],
        head_hidden=model['head_hidden'],
        num_classes=model['num_classes'],
        heads=model['heads'],
        attn_downsample=model['attn_downsample'],
        image_channels=config['data']['camera']['channels'],
        grid=SplineGrid(lower=float(kan['grid_min']), upper=float(kan['grid_max']),
                        grid_size=int(kan['grid_size']), spline_order=int(kan['spline_order'])),
        bev=PillarGridConfig(**model['bev']),
        depth=DepthBinConfig(**model['depth']),
    )
    optimizer = OptimizerConfig(
        lr=float(opt['lr']),
        weight_decay=float(opt['weight_decay']),
        warmup_ratio=float(opt['warmup_ratio']),
        warmup_fraction=float(opt['warmup_fraction']),
        betas=tuple(float(b) for b in opt['betas']),
        eps=float(opt['eps']),
        min_lr=float(opt['min_lr']),
        batch_size=int(opt['batch_size']),
        stage_epochs=tuple(int(e) for e in opt['stage_epochs']),
        toy_factor=float(opt['toy_factor']),
    )
    data = DataConfig(
        dataset_dir=str(config['data']['dataset_dir']),
        splits=tuple((name, int(size)) for name, size in config['data']['splits'].items()),
        scene_set=build_scene_set_config(config),
    )
    return RunConfig(
        model=model_config,
        optimizer=optimizer,
        data=data,
        ablation=toggles,
        evaluation=EvaluationConfig(**config['evaluation']),
        execution=ExecutionConfig(**config['execution']),
        seed=int(config['seed']),
        output_dir=str(config['output']['dir']),
        config_hash=config_hash(config),
        dataset_hash=dataset_hash(config),
    )
