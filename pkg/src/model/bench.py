"""
KAN と通常層の比較ベンチマーク

同程度のパラメータ数の KAN / MLP（および KANConv / 畳み込み）で2次元の合成関数を学習し、
パラメータ数・初期 MSE・最終 MSE を比較します。
計測時間は別表に分けるので、主表はシードが同じなら毎回同一になります。
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.kan.kan_conv import KanConv2d
from src.kan.kan_layer import KanLayer, param_count
from src.kan.spline import SplineGrid
from src.tensor import ops
from src.tensor.layers import Conv2d, Linear, Module
from src.tensor.optim import OptimizerState, adamw_step
from src.tensor.tensor import Tensor, no_grad
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (3, 5, 8)
DEFAULT_EPOCHS = 50
DEFAULT_LR = 1e-2
BATCH_SIZE = 32
NUM_TRAIN = 256
NUM_TEST = 256
IMAGE_SIZE = 8
CONV_KERNELS = (1, 3)
PARITY_TOLERANCE = 0.10

BENCH_COLUMNS = ['task', 'model', 'hidden', 'params', 'param_ratio', 'parity_ok',
                 'epochs', 'init_mse', 'final_mse']
TIMING_COLUMNS = ['task', 'model', 'hidden', 'seconds']


class BenchError(Exception):
    """ベンチマーク設定のエラー"""
    pass


def target_function(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """f(x, y) = exp(sin(πx) + y²)"""
    return np.exp(np.sin(np.pi * x) + y * y)


def num_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def solve_width(target_params: int, per_unit: int, constant: int) -> int:
    """params = per_unit·m + constant が target に最も近い幅 m（1 以上）"""
    return max(1, int(round((target_params - constant) / per_unit)))


class KanNet(Module):
    """[2, h, 1] の KAN"""

    def __init__(self, hidden: int, grid: SplineGrid, rng: np.random.Generator):
        super().__init__()
        self.layers = [KanLayer(2, hidden, grid=grid, rng=rng), KanLayer(hidden, 1, grid=grid, rng=rng)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def kan_params(self) -> int:
        return sum(param_count(layer) for layer in self.layers)


class MlpNet(Module):
    """[2, m, 1] の MLP（SiLU）"""

    def __init__(self, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.layers = [Linear(2, hidden, 'silu', rng=rng), Linear(hidden, 1, rng=rng)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class KanConvNet(Module):
    """KANConv 1段（2 → 1 チャネル、同サイズ）"""

    def __init__(self, kernel_size: int, grid: SplineGrid, rng: np.random.Generator):
        super().__init__()
        self.conv = KanConv2d(2, 1, kernel_size=kernel_size, padding=kernel_size // 2, grid=grid, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class ConvNet(Module):
    """畳み込み（2 → m, SiLU）→ 1×1 畳み込み（m → 1）"""

    def __init__(self, kernel_size: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(2, hidden, kernel_size, padding=kernel_size // 2, bias=True, rng=rng)
        self.out = Conv2d(hidden, 1, 1, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(ops.silu(self.conv(x)))


@dataclass
class BenchResult:
    """ベンチマーク結果（rows は決定的、timings は計測値）"""
    rows: List[Dict[str, Any]] = field(default_factory=list)
    timings: List[Dict[str, Any]] = field(default_factory=list)

    def parity_ok(self) -> bool:
        return all(row['parity_ok'] for row in self.rows)


def point_dataset(rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray]:
    """[-1, 1]² の一様サンプルと目標値 (count, 2), (count, 1)"""
    xy = rng.uniform(-1.0, 1.0, size=(count, 2))
    return xy, target_function(xy[:, 0], xy[:, 1])[:, None]


def image_dataset(rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray]:
    """画素ごとに目標関数を適用した 2 チャネル画像 (count, 2, s, s), (count, 1, s, s)"""
    images = rng.uniform(-1.0, 1.0, size=(count, 2, IMAGE_SIZE, IMAGE_SIZE))
    return images, target_function(images[:, 0], images[:, 1])[:, None]


def mse(model: Module, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
    residual = ops.sub(model(Tensor(inputs)), Tensor(targets))
    return ops.reduce_mean(ops.mul(residual, residual))


def fit(model: Module, train: Tuple[np.ndarray, np.ndarray], test: Tuple[np.ndarray, np.ndarray],
        epochs: int, rng: np.random.Generator, lr: float = DEFAULT_LR,
        batch_size: int = BATCH_SIZE) -> Tuple[float, float]:
    """
    AdamW（重み減衰なし）でミニバッチ学習

    Returns:
        (初期テスト MSE, 最終テスト MSE)。epochs=0 なら両者は同じ
    """
    with no_grad():
        init_mse = float(mse(model, *test).item())
    if epochs <= 0:
        return init_mse, init_mse

    inputs, targets = train
    per_epoch = math.ceil(len(inputs) / batch_size)
    state = OptimizerState(lr=lr, weight_decay=0.0, warmup_ratio=1.0, warmup_fraction=0.0,
                           total_steps=max(epochs * per_epoch, 1))
    for _ in range(epochs):
        order = rng.permutation(len(inputs))
        for start in range(0, len(inputs), batch_size):
            index = order[start:start + batch_size]
            model.zero_grad()
            loss = mse(model, inputs[index], targets[index])
            loss.backward()
            adamw_step(model.named_parameters(), state)

    with no_grad():
        final_mse = float(mse(model, *test).item())
    return init_mse, final_mse


def _run_pair(task: str, hidden: int, pair: Sequence[Tuple[str, Module, int]],
              train, test, epochs: int, seed: int, result: BenchResult) -> None:
    reference = pair[0][2]
    for model_name, model, params in pair:
        ratio = params / reference
        parity = abs(ratio - 1.0) <= PARITY_TOLERANCE
        if not parity:
            logger.warning(f"パラメータ数の差が {PARITY_TOLERANCE:.0%} を超えています: "
                           f"{task}/{model_name} {params} vs {reference}")
        started = time.perf_counter()
        init_mse, final_mse = fit(model, train, test, epochs,
                                  derive_rng(seed, f"bench/{task}/{model_name}/{hidden}"))
        seconds = time.perf_counter() - started
        result.rows.append({'task': task, 'model': model_name, 'hidden': hidden, 'params': params,
                            'param_ratio': ratio, 'parity_ok': parity, 'epochs': epochs,
                            'init_mse': init_mse, 'final_mse': final_mse})
        result.timings.append({'task': task, 'model': model_name, 'hidden': hidden, 'seconds': seconds})
        logger.info(f"{task}/{model_name} (幅 {hidden}, パラメータ {params}): "
                    f"MSE {init_mse:.4e} → {final_mse:.4e} ({seconds:.2f}秒)")


def run_bench(hidden_widths: Sequence[int] = DEFAULT_HIDDEN, epochs: int = DEFAULT_EPOCHS,
              seed: int = 0, grid: Optional[SplineGrid] = None, kernels: Sequence[int] = CONV_KERNELS,
              progress: Optional[Callable[[str], None]] = None) -> BenchResult:
    """
    KAN と通常層の比較を実行

    Args:
        hidden_widths: KAN の隠れ幅（MLP 幅はパラメータ数が揃うように決める）
        epochs: 学習エポック数（0 なら初期 MSE のみ）
        seed: データ・初期化シード
        grid: スプライングリッド
        kernels: KANConv 比較のカーネルサイズ

    Raises:
        BenchError: 幅・エポック数が不正
    """
    if not hidden_widths or any(h < 1 for h in hidden_widths):
        raise BenchError(f"隠れ幅は1以上である必要があります: {list(hidden_widths)}")
    if epochs < 0:
        raise BenchError(f"エポック数は0以上である必要があります: {epochs}")
    grid = grid or SplineGrid()
    result = BenchResult()

    data_rng = derive_rng(seed, 'bench/points')
    train, test = point_dataset(data_rng, NUM_TRAIN), point_dataset(data_rng, NUM_TEST)
    for hidden in hidden_widths:
        kan = KanNet(hidden, grid, derive_rng(seed, f"bench/kan/{hidden}"))
        kan_params = kan.kan_params()
        width = solve_width(kan_params, per_unit=4, constant=1)
        mlp = MlpNet(width, derive_rng(seed, f"bench/mlp/{hidden}"))
        _run_pair('fit2d', hidden, [('kan', kan, kan_params), ('mlp', mlp, num_parameters(mlp))],
                  train, test, epochs, seed, result)
        if progress:
            progress(f"fit2d 幅 {hidden} 完了")

    image_rng = derive_rng(seed, 'bench/images')
    train_img, test_img = image_dataset(image_rng, NUM_TRAIN // 8), image_dataset(image_rng, NUM_TEST // 8)
    for k in kernels:
        kan_conv = KanConvNet(k, grid, derive_rng(seed, f"bench/kanconv/{k}"))
        kan_params = param_count(kan_conv.conv)
        width = solve_width(kan_params, per_unit=2 * k * k + 2, constant=1)
        conv = ConvNet(k, width, derive_rng(seed, f"bench/conv/{k}"))
        _run_pair(f"conv{k}x{k}", width,
                  [('kanconv', kan_conv, kan_params), ('conv', conv, num_parameters(conv))],
                  train_img, test_img, epochs, seed, result)
        if progress:
            progress(f"conv{k}x{k} 完了")

    return result
