"""
3段階学習モジュール

  ステージ1: PointEncoder（KAN 線形層）のみ学習、他は凍結
  ステージ2: KANConv を含むモジュール（vtransform, fuser）のみ学習、PointEncoder は凍結
  ステージ3: 全体を学習

学習率スケジュールは全ステージを通した1本のウォームアップ + コサイン減衰です。
ステップごとにグループ別の勾配ノルムを記録するので、凍結の効き方はログだけで確認できます。
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.detection.loss import detection_loss
from src.encoders.pillars import PillarGrid
from src.io.run_config import OptimizerConfig
from src.model.network import MODULE_NAMES, PARAMETER_GROUPS, KanInfraDetModel, prepare_batch
from src.synth.scene import SceneSample
from src.tensor.optim import OptimizerState, adamw_step, lr_at
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

STAGE_MODULES: Tuple[Tuple[str, ...], ...] = (
    ('point_encoder',),
    ('vtransform', 'fuser'),
    MODULE_NAMES,
)

STEP_LOG_COLUMNS = (['stage', 'epoch', 'step', 'lr', 'loss', 'heat', 'reg', 'num_pos']
                    + [f"grad_norm_{g}" for g in PARAMETER_GROUPS])
EPOCH_LOG_COLUMNS = ['stage', 'epoch', 'loss', 'seconds']
STAGE_SUMMARY_COLUMNS = ['stage', 'modules', 'epochs', 'steps', 'trainable_parameters',
                         'first_epoch_loss', 'last_epoch_loss']


class TrainingError(Exception):
    """学習関連のエラー"""
    pass


@dataclass
class TrainingStats:
    """学習統計情報"""
    steps: int = 0
    epochs: int = 0
    samples_seen: int = 0
    skipped_steps: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'steps': self.steps,
            'epochs': self.epochs,
            'samples_seen': self.samples_seen,
            'skipped_steps': self.skipped_steps,
        }

    def reset(self):
        self.steps = 0
        self.epochs = 0
        self.samples_seen = 0
        self.skipped_steps = 0


@dataclass
class TrainResult:
    """学習結果"""
    step_log: List[Dict[str, Any]] = field(default_factory=list)
    epoch_log: List[Dict[str, Any]] = field(default_factory=list)
    stage_summary: List[Dict[str, Any]] = field(default_factory=list)
    interrupted: bool = False
    stage: int = 0
    steps: int = 0

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_log[-1]['loss'] if self.epoch_log else None


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    return math.ceil(num_samples / batch_size) if num_samples else 0


def group_grad_norms(model: KanInfraDetModel) -> Dict[str, float]:
    """グループごとの勾配 L2 ノルム（勾配なしは 0）"""
    norms = {}
    for group in PARAMETER_GROUPS:
        total = 0.0
        for param in model.group_parameters(group):
            if param.grad is not None:
                total += float(np.sum(np.square(param.grad, dtype=np.float64)))
        norms[group] = math.sqrt(total)
    return norms


class Trainer:
    """3段階学習器"""

    def __init__(self, model: KanInfraDetModel, optimizer: OptimizerConfig, seed: int = 0,
                 regression_weight: Optional[float] = None,
                 should_stop: Optional[Callable[[], bool]] = None):
        """
        Trainer初期化

        Args:
            model: 学習するモデル
            optimizer: 最適化設定（エポック数・バッチサイズを含む）
            seed: シャッフル用シード
            regression_weight: 回帰損失の重み（省略時は既定値）
            should_stop: ステップ境界で評価する中断判定
        """
        self.model = model
        self.optimizer = optimizer
        self.seed = seed
        self.regression_weight = regression_weight
        self.should_stop = should_stop or (lambda: False)
        self._pillar_cache: Dict[str, PillarGrid] = {}
        self._stats = TrainingStats()

    def get_stats(self) -> Dict[str, Any]:
        return self._stats.to_dict()

    def reset_stats(self):
        self._stats.reset()

    def _loss_kwargs(self) -> Dict[str, Any]:
        return {} if self.regression_weight is None else {'regression_weight': self.regression_weight}

    def train(self, samples: Sequence[SceneSample],
              stage_epochs: Optional[Sequence[int]] = None) -> Tuple[TrainResult, OptimizerState]:
        """
        3段階学習を実行

        Args:
            samples: 学習サンプル
            stage_epochs: ステージごとのエポック数（省略時はトイ係数適用済みの設定値）

        Returns:
            (TrainResult, 最適化状態)

        Raises:
            TrainingError: サンプルが空、またはエポック設定が不正
        """
        if not samples:
            raise TrainingError("学習サンプルがありません")
        epochs = tuple(stage_epochs) if stage_epochs is not None else self.optimizer.scaled_epochs
        if len(epochs) != len(STAGE_MODULES) or any(e < 0 for e in epochs):
            raise TrainingError(f"ステージごとのエポック数が不正です: {epochs}")

        batch_size = max(1, min(self.optimizer.batch_size, len(samples)))
        per_epoch = steps_per_epoch(len(samples), batch_size)
        total_steps = max(sum(epochs) * per_epoch, 1)
        state = OptimizerState(
            lr=self.optimizer.lr, weight_decay=self.optimizer.weight_decay,
            betas=tuple(self.optimizer.betas), eps=self.optimizer.eps,
            warmup_ratio=self.optimizer.warmup_ratio, warmup_fraction=self.optimizer.warmup_fraction,
            total_steps=total_steps, min_lr=self.optimizer.min_lr,
        )
        logger.info(f"学習開始: サンプル数={len(samples)} バッチ={batch_size} "
                    f"エポック={list(epochs)} 総ステップ={total_steps}")

        result = TrainResult()
        rng = derive_rng(self.seed, 'shuffle')
        self.model.train()

        for stage_index, (modules, n_epochs) in enumerate(zip(STAGE_MODULES, epochs), start=1):
            result.stage = stage_index
            trainable = self.model.set_trainable_modules(modules)
            logger.info(f"=== ステージ{stage_index} 開始: 学習対象={list(modules)} "
                        f"パラメータ数={trainable} エポック数={n_epochs} ===")
            epoch_losses: List[float] = []
            stage_steps = 0

            for epoch in range(1, n_epochs + 1):
                started = time.perf_counter()
                order = rng.permutation(len(samples))
                losses: List[float] = []
                for start in range(0, len(samples), batch_size):
                    if self.should_stop():
                        result.interrupted = True
                        break
                    batch = [samples[i] for i in order[start:start + batch_size]]
                    row = self._step(batch, state, stage_index, epoch)
                    result.step_log.append(row)
                    losses.append(row['loss'])
                    stage_steps += 1
                if result.interrupted:
                    break
                epoch_loss = float(np.mean(losses))
                epoch_losses.append(epoch_loss)
                result.epoch_log.append({'stage': stage_index, 'epoch': epoch, 'loss': epoch_loss,
                                         'seconds': time.perf_counter() - started})
                self._stats.epochs += 1
                logger.info(f"ステージ{stage_index} エポック{epoch}/{n_epochs}: loss={epoch_loss:.6f}")

            result.stage_summary.append({
                'stage': stage_index,
                'modules': ','.join(m for m in modules if getattr(self.model, m) is not None),
                'epochs': len(epoch_losses),
                'steps': stage_steps,
                'trainable_parameters': trainable,
                'first_epoch_loss': epoch_losses[0] if epoch_losses else None,
                'last_epoch_loss': epoch_losses[-1] if epoch_losses else None,
            })
            if result.interrupted:
                logger.warning(f"学習を中断しました: ステージ{stage_index} ステップ{state.step}")
                break

        self.model.set_trainable_modules(MODULE_NAMES)
        result.steps = state.step
        logger.info(f"学習終了: ステップ数={state.step} 最終loss={result.final_loss}")
        return result, state

    def _step(self, batch: Sequence[SceneSample], state: OptimizerState,
              stage: int, epoch: int) -> Dict[str, Any]:
        """1ステップ（順伝播 → 損失 → 逆伝播 → AdamW）"""
        self.model.zero_grad()
        inputs = prepare_batch(batch, self.model.config, self._pillar_cache)
        pred = self.model(inputs)
        loss, terms = detection_loss(pred, [s.scene for s in batch], self.model.config.bev,
                                     return_terms=True, **self._loss_kwargs())
        step = state.step
        if loss.requires_grad:
            loss.backward()
            norms = group_grad_norms(self.model)
            # 空の点群だけのバッチでは PointEncoder に勾配が届かない
            named = [(name, p) for name, p in self.model.named_parameters()
                     if not p.requires_grad or p.grad is not None]
            lr = adamw_step(named, state)
        else:
            # 学習対象に勾配が流れない場合はスケジュールだけ進める
            norms = dict.fromkeys(PARAMETER_GROUPS, 0.0)
            lr = lr_at(min(state.step, state.total_steps), state)
            state.step += 1
            self._stats.skipped_steps += 1
        self._stats.steps += 1
        self._stats.samples_seen += len(batch)
        logger.debug(f"step={step} lr={lr:.3e} loss={terms['total']:.6f}")

        row = {'stage': stage, 'epoch': epoch, 'step': step, 'lr': lr, 'loss': terms['total'],
               'heat': terms['heat'], 'reg': terms['reg'], 'num_pos': terms['num_pos']}
        row.update({f"grad_norm_{g}": v for g, v in norms.items()})
        return row
