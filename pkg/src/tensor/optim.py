"""
最適化モジュール

AdamW（重み減衰分離型 Adam）と、ウォームアップ付きコサインアニーリング学習率を提供します。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from src.tensor.layers import Parameter

logger = logging.getLogger(__name__)


class OptimizerError(Exception):
    """最適化処理のエラー"""
    pass


class ScheduleError(OptimizerError):
    """学習率スケジュールのエラー"""
    pass


@dataclass
class OptimizerState:
    """AdamW の状態（モーメントはパラメータ名で保持）"""
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_ratio: float = 0.3
    warmup_fraction: float = 0.1
    total_steps: int = 2
    min_lr: float = 0.0
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps < 1:
            raise OptimizerError(f"総ステップ数は1以上である必要があります: {self.total_steps}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise OptimizerError(f"ウォームアップ比は [0, 1] である必要があります: {self.warmup_ratio}")

    @property
    def warmup_end(self) -> int:
        """ウォームアップ終了ステップ（1 以上、総ステップ未満）"""
        if self.total_steps < 2:
            return self.total_steps
        steps = int(round(self.warmup_fraction * self.total_steps))
        return min(max(steps, 1), self.total_steps - 1)


def lr_at(step: int, state: OptimizerState) -> float:
    """
    指定ステップの学習率

    0 → warmup_end で base·warmup_ratio から base へ線形に上げ、
    その後 total_steps で min_lr までコサイン減衰します。

    Raises:
        ScheduleError: step が [0, total_steps] の外
    """
    if step < 0 or step > state.total_steps:
        raise ScheduleError(f"ステップが範囲外です: {step}（0〜{state.total_steps}）")

    base = state.lr
    warmup_end = state.warmup_end
    if step <= warmup_end and warmup_end < state.total_steps:
        start = base * state.warmup_ratio
        return start + (base - start) * step / warmup_end

    decay_span = state.total_steps - warmup_end
    if decay_span <= 0:
        return state.min_lr
    progress = (step - warmup_end) / decay_span
    return state.min_lr + (base - state.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(named_params: Iterable[Tuple[str, Parameter]], state: OptimizerState,
               lr: Optional[float] = None) -> float:
    """
    AdamW で1ステップ更新

    requires_grad=False のパラメータ（凍結中）は更新しません。

    Args:
        named_params: (名前, パラメータ) の列
        state: 最適化状態（モーメント・ステップを更新）
        lr: 学習率（省略時は lr_at(state.step)）

    Returns:
        使用した学習率

    Raises:
        OptimizerError: 学習対象パラメータに勾配がない場合
    """
    trainable = [(name, p) for name, p in named_params if p.requires_grad]
    missing = [name for name, p in trainable if p.grad is None]
    if missing:
        raise OptimizerError(f"勾配がありません: {', '.join(missing[:5])}")

    if lr is None:
        lr = lr_at(min(state.step, state.total_steps), state)

    state.step += 1
    beta1, beta2 = state.betas
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    for name, param in trainable:
        grad = param.grad
        if grad.shape != param.shape:
            raise OptimizerError(f"勾配形状が一致しません: {name} {grad.shape} != {param.shape}")

        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)

        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v

        updated = param.data * (1.0 - lr * state.weight_decay)
        updated = updated - lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param.data = updated.astype(param.dtype)

    return lr
