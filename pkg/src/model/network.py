"""
融合検出ネットワーク

PointEncoder（LiDAR）と カメラバックボーン + KANvtransform（カメラ）の BEV 特徴を、
Camera-LiDAR クロスアテンションと ConvKANfuser で融合し、検出ヘッドに渡します。
4つのアブレーション切り替えはそれぞれ独立に組み合わせられます。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.detection.boxes import Box3D
from src.detection.decode import DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH, decode
from src.detection.head import DetectionHead, HeadOutput
from src.encoders.camera import CameraBackboneStub, CameraModel, KanvTransform
from src.encoders.pillars import PillarGrid, pillarize
from src.encoders.point_encoder import PointEncoder
from src.fusion.cross_attn import CameraLidarCrossAttn
from src.fusion.fuser import ConvKanFuser
from src.io.checkpoint import Checkpoint, CheckpointError
from src.io.run_config import ABLATION_PRESETS, AblationToggles, ModelConfig, RunConfig, build_run_config
from src.synth.scene import SceneSample
from src.tensor.layers import Module, Parameter
from src.tensor.tensor import Tensor, TensorError, no_grad
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ('point_encoder', 'camera', 'cross_attn', 'fuser', 'head')
MODULE_NAMES = ('point_encoder', 'backbone', 'vtransform', 'cross_attn', 'fuser', 'head')

__all__ = ['ABLATION_PRESETS', 'PARAMETER_GROUPS', 'MODULE_NAMES', 'ModelBatch', 'ModelFeatures',
           'KanInfraDetModel', 'prepare_batch', 'build_model', 'make_checkpoint',
           'model_from_checkpoint', 'predict']


@dataclass
class ModelBatch:
    """ネットワーク入力（ピラー、カメラ特徴画像、カメラモデル）"""
    pillars: List[PillarGrid]
    images: np.ndarray        # (b, c₀, H, W)
    cameras: List[CameraModel]
    scene_ids: List[str]

    @property
    def batch_size(self) -> int:
        return len(self.pillars)


@dataclass
class ModelFeatures:
    """順伝播の中間 BEV 特徴（可視化用）"""
    lidar: Tensor
    camera: Tensor
    attended: Tensor
    fused: Tensor
    output: HeadOutput


def prepare_batch(samples: Sequence[SceneSample], model_cfg: ModelConfig,
                  pillar_cache: Optional[Dict[str, PillarGrid]] = None) -> ModelBatch:
    """
    サンプル列をネットワーク入力に変換

    点の間引きシードはシードごとに固定なので、pillar_cache でピラー化を再利用できます。
    """
    pillars = []
    for sample in samples:
        key = sample.scene.scene_id
        grid = pillar_cache.get(key) if pillar_cache is not None and key else None
        if grid is None:
            grid = pillarize(sample.cloud, model_cfg.bev, seed=sample.scene.seed)
            if pillar_cache is not None and key:
                pillar_cache[key] = grid
        pillars.append(grid)
    images = np.stack([np.asarray(s.camera_features) for s in samples])
    return ModelBatch(pillars, images, [s.scene.camera for s in samples],
                      [s.scene.scene_id for s in samples])


class KanInfraDetModel(Module):
    """KAN 版カメラ・LiDAR 融合 3D 検出モデル"""

    def __init__(self, config: Optional[ModelConfig] = None,
                 toggles: Optional[AblationToggles] = None, seed: int = 0):
        """
        Args:
            config: モデル設定
            toggles: アブレーション切り替え
            seed: パラメータ初期化シード（モジュールごとに独立した乱数列を使う）
        """
        super().__init__()
        self.config = config or ModelConfig()
        self.toggles = toggles or AblationToggles()
        cfg, t = self.config, self.toggles

        self.point_encoder = PointEncoder(cfg.pillar_channels, cfg.lidar_channels,
                                          use_kan=t.use_kan_point_encoder, grid=cfg.grid,
                                          rng=derive_rng(seed, 'point_encoder'))
        self.backbone = CameraBackboneStub(cfg.image_channels, cfg.backbone_channels,
                                           rng=derive_rng(seed, 'backbone'))
        self.vtransform = KanvTransform(cfg.backbone_channels, cfg.vtransform_channels, cfg.camera_channels,
                                        depth_bins=cfg.depth.bins, use_kan=t.use_kanv_transform,
                                        grid=cfg.grid, rng=derive_rng(seed, 'vtransform'))
        self.cross_attn = (CameraLidarCrossAttn(cfg.lidar_channels, cfg.heads, cfg.attn_downsample,
                                                rng=derive_rng(seed, 'cross_attn'))
                           if t.use_cross_attn else None)
        self.fuser = ConvKanFuser(cfg.lidar_channels, cfg.camera_channels, cfg.fused_channels,
                                  use_kan=t.use_conv_kan_fuser, grid=cfg.grid,
                                  rng=derive_rng(seed, 'fuser'))
        self.head = DetectionHead(cfg.fused_channels, cfg.num_classes, cfg.head_hidden,
                                  rng=derive_rng(seed, 'head'))

        logger.debug(f"KanInfraDetModelを初期化しました: {self.toggles.to_dict()} "
                     f"パラメータ数={self.num_parameters()}")

    def group_modules(self, group: str) -> List[Module]:
        """パラメータグループに属するモジュール"""
        if group == 'point_encoder':
            return [self.point_encoder]
        if group == 'camera':
            return [self.backbone, self.vtransform]
        if group == 'cross_attn':
            return [self.cross_attn] if self.cross_attn is not None else []
        if group == 'fuser':
            return [self.fuser]
        if group == 'head':
            return [self.head]
        raise KeyError(f"未知のパラメータグループです: {group}")

    def group_parameters(self, group: str) -> List[Parameter]:
        return [p for module in self.group_modules(group) for p in module.parameters()]

    def group_of(self) -> Dict[str, str]:
        """パラメータ名 → グループ名"""
        prefixes = {'point_encoder': 'point_encoder', 'backbone': 'camera', 'vtransform': 'camera',
                    'cross_attn': 'cross_attn', 'fuser': 'fuser', 'head': 'head'}
        return {name: prefixes[name.split('.', 1)[0]] for name, _ in self.named_parameters()}

    def parameter_report(self) -> Dict[str, int]:
        """グループごとのパラメータ数と合計"""
        report = {g: int(sum(p.size for p in self.group_parameters(g))) for g in PARAMETER_GROUPS}
        report['total'] = self.num_parameters()
        return report

    def set_trainable_modules(self, names: Sequence[str]) -> int:
        """
        指定したサブモジュールのみ学習対象にし、それ以外を凍結

        Returns:
            学習対象のパラメータ数
        """
        unknown = sorted(set(names) - set(MODULE_NAMES))
        if unknown:
            raise KeyError(f"未知のモジュールです: {unknown}")
        trainable = 0
        for name in MODULE_NAMES:
            module = getattr(self, name)
            if module is None:
                continue
            module.set_trainable(name in names)
            if name in names:
                trainable += module.num_parameters()
        return trainable

    def forward_features(self, batch: ModelBatch) -> ModelFeatures:
        """中間特徴つきの順伝播"""
        lidar = self.point_encoder(batch.pillars)
        image_features = self.backbone(Tensor(batch.images))
        camera = self.vtransform(image_features, batch.cameras, self.config.bev)
        attended = self.cross_attn(lidar, camera) if self.cross_attn is not None else camera
        fused = self.fuser(lidar, attended)
        output = self.head(fused)
        return ModelFeatures(lidar, camera, attended, fused, output)

    def forward(self, batch: ModelBatch) -> HeadOutput:
        return self.forward_features(batch).output


def build_model(run_config: RunConfig) -> KanInfraDetModel:
    return KanInfraDetModel(run_config.model, run_config.ablation, seed=run_config.seed)


def make_checkpoint(model: KanInfraDetModel, run_config: RunConfig, config: Dict[str, Any],
                    interrupted: bool = False, stage: int = 0, step: int = 0) -> Checkpoint:
    """モデルの現在値から Checkpoint を作成"""
    return Checkpoint(
        state={name: np.array(value, copy=True) for name, value in model.state_dict().items()},
        config=config,
        config_hash=run_config.config_hash,
        dataset_hash=run_config.dataset_hash,
        grid=model.config.grid.to_dict(),
        parameter_report=model.parameter_report(),
        interrupted=interrupted,
        stage=stage,
        step=step,
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> Tuple[KanInfraDetModel, RunConfig]:
    """
    チェックポイントに記録された設定でモデルを組み立て、値を復元

    Raises:
        CheckpointError: 設定の復元、またはテンソルの復元に失敗
    """
    try:
        run_config = build_run_config(checkpoint.config)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"チェックポイントの設定を復元できません: {e}")
    model = build_model(run_config)
    try:
        model.load_state_dict(checkpoint.state)
    except TensorError as e:
        raise CheckpointError(f"チェックポイントのテンソルを復元できません: {e}")
    model.eval()
    return model, run_config


def predict(model: KanInfraDetModel, samples: Sequence[SceneSample], batch_size: int = 4,
            score_thresh: float = DEFAULT_SCORE_THRESH, nms_iou: float = DEFAULT_NMS_IOU,
            max_workers: int = 1) -> Dict[str, List[Box3D]]:
    """
    推論して検出ボックスを復元

    順伝播はバッチ単位、復元（ピーク抽出 + NMS）はサンプル単位でワーカープールに分けます。

    Returns:
        シーンID → 検出ボックス
    """
    model.eval()
    outputs: List[Tuple[str, HeadOutput]] = []
    with no_grad():
        for start in range(0, len(samples), max(1, batch_size)):
            batch = prepare_batch(samples[start:start + batch_size], model.config)
            pred = model(batch)
            outputs.extend((scene_id, pred.sample(i)) for i, scene_id in enumerate(batch.scene_ids))

    bev = model.config.bev
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        futures = [executor.submit(decode, output, bev, score_thresh, nms_iou) for _, output in outputs]
        boxes = [future.result() for future in futures]
    detections = {scene_id: found for (scene_id, _), found in zip(outputs, boxes)}
    logger.info(f"推論完了: シーン数={len(detections)} 検出数={sum(len(b) for b in detections.values())}")
    return detections
