"""
チェックポイント入出力モジュール

  <dir>/manifest.yaml        テンソル名・形状・dtype、スプライングリッド、設定、ハッシュ、パラメータ集計
  <dir>/tensors/<name>.kft   パラメータおよびバッファ（KFT1）
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml

from src.io.tensor_io import TensorFormatError, load_kft1, save_kft1

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.yaml'
TENSORS_DIR = 'tensors'

PathLike = Union[str, Path]


class CheckpointError(Exception):
    """チェックポイント読み書きのエラー"""
    pass


@dataclass
class Checkpoint:
    """チェックポイントの内容"""
    state: Dict[str, np.ndarray]
    config: Dict[str, Any]
    config_hash: str = ''
    dataset_hash: str = ''
    grid: Dict[str, Any] = field(default_factory=dict)
    parameter_report: Dict[str, int] = field(default_factory=dict)
    interrupted: bool = False
    stage: int = 0
    step: int = 0

    def manifest(self) -> Dict[str, Any]:
        return {
            'format_version': FORMAT_VERSION,
            'config_hash': self.config_hash,
            'dataset_hash': self.dataset_hash,
            'interrupted': bool(self.interrupted),
            'stage': int(self.stage),
            'step': int(self.step),
            'grid': dict(self.grid),
            'parameter_report': {k: int(v) for k, v in self.parameter_report.items()},
            'tensors': [
                {'name': name, 'shape': [int(d) for d in array.shape], 'dtype': str(array.dtype)}
                for name, array in self.state.items()
            ],
            'config': self.config,
        }


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> Path:
    """
    チェックポイントを保存

    Raises:
        CheckpointError: 書き込み失敗
    """
    root = Path(path)
    try:
        (root / TENSORS_DIR).mkdir(parents=True, exist_ok=True)
        for name, array in checkpoint.state.items():
            save_kft1(root / TENSORS_DIR / f"{name}.kft", np.asarray(array))
        with open(root / MANIFEST_NAME, 'w', encoding='utf-8') as f:
            yaml.safe_dump(checkpoint.manifest(), f, allow_unicode=True, sort_keys=False)
    except (OSError, TensorFormatError, yaml.YAMLError) as e:
        raise CheckpointError(f"チェックポイント書き込みエラー: {e}")

    status = '（中断）' if checkpoint.interrupted else ''
    logger.info(f"チェックポイントを保存しました{status}: {root}（{len(checkpoint.state)} テンソル）")
    return root


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    チェックポイントを読み込み

    Raises:
        CheckpointError: マニフェストやテンソルの欠落・破損、形状不一致
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"チェックポイントのマニフェストが見つかりません: {manifest_path}")
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise CheckpointError(f"マニフェストの解析に失敗しました: {e}")
    if not isinstance(manifest, dict) or 'tensors' not in manifest or 'config' not in manifest:
        raise CheckpointError(f"マニフェストが不正です: {manifest_path}")

    state: Dict[str, np.ndarray] = {}
    for entry in manifest['tensors']:
        name = entry['name']
        try:
            array = load_kft1(root / TENSORS_DIR / f"{name}.kft")
        except FileNotFoundError:
            raise CheckpointError(f"テンソルファイルが見つかりません: {name}")
        except TensorFormatError as e:
            raise CheckpointError(f"テンソルファイルが破損しています: {name}: {e}")
        if list(array.shape) != list(entry['shape']):
            raise CheckpointError(f"形状がマニフェストと一致しません: {name} {array.shape} != {entry['shape']}")
        state[name] = array

    return Checkpoint(
        state=state,
        config=manifest['config'],
        config_hash=manifest.get('config_hash', ''),
        dataset_hash=manifest.get('dataset_hash', ''),
        grid=manifest.get('grid', {}),
        parameter_report=manifest.get('parameter_report', {}),
        interrupted=bool(manifest.get('interrupted', False)),
        stage=int(manifest.get('stage', 0)),
        step=int(manifest.get('step', 0)),
    )


def checkpoint_exists(path: Optional[PathLike]) -> bool:
    return path is not None and (Path(path) / MANIFEST_NAME).exists()
