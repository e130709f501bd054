"""
標準レイヤーモジュール

Module 基底クラスと、線形層・通常畳み込み・バッチ正規化を提供します。
パラメータは属性として保持され、named_parameters で階層名付きで列挙されます。
"""

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.tensor import ops
from src.tensor.tensor import Tensor, TensorError, get_dtype

logger = logging.getLogger(__name__)

ACTIVATIONS = ('none', 'relu', 'silu')


class Parameter(Tensor):
    """学習対象の葉テンソル"""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """レイヤー基底クラス"""

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, 'Module']]:
        """直下の子モジュールを列挙"""
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        """階層名付きでパラメータを列挙"""
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{key}", value
        for key, child in self.children():
            yield from child.named_parameters(prefix=f"{prefix}{key}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        """階層名付きでバッファ（学習しない状態）を列挙"""
        for key, value in self._buffers.items():
            yield f"{prefix}{key}", value
        for key, child in self.children():
            yield from child.named_buffers(prefix=f"{prefix}{key}.")

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def set_trainable(self, trainable: bool) -> None:
        """配下の全パラメータの requires_grad を切り替え"""
        for param in self.parameters():
            param.requires_grad = trainable
            if not trainable:
                param.grad = None

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        """パラメータとバッファの名前→配列辞書"""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        名前→配列辞書から値を復元

        Raises:
            TensorError: 名前の過不足、または形状不一致
        """
        expected = set(self.state_dict())
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise TensorError(f"状態辞書が一致しません: 不足={missing[:5]} 余剰={unexpected[:5]}")

        for name, param in self.named_parameters():
            if state[name].shape != param.shape:
                raise TensorError(f"形状が一致しません: {name} {state[name].shape} != {param.shape}")
            param.data = np.array(state[name], dtype=param.dtype)
        self._load_buffers(state, prefix='')

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for key in list(self._buffers):
            self._buffers[key] = np.array(state[f"{prefix}{key}"], dtype=self._buffers[key].dtype)
        for key, child in self.children():
            child._load_buffers(state, prefix=f"{prefix}{key}.")


def apply_activation(x: Tensor, activation: str) -> Tensor:
    if activation == 'relu':
        return ops.relu(x)
    if activation == 'silu':
        return ops.silu(x)
    return x


class Linear(Module):
    """全結合層 y = σ(x Wᵀ + b)"""

    def __init__(self, n_in: int, n_out: int, activation: str = 'none', bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise TensorError(f"未対応の活性化関数です: {activation}")
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ops.ShapeMismatchError('linear', f"入力次元 {x.shape[-1]} != {self.n_in}")
        out = ops.matmul(x, ops.transpose(self.weight))
        if self.bias is not None:
            out = out + self.bias
        return apply_activation(out, self.activation)


class Conv2d(Module):
    """通常の2次元畳み込み"""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel_size * kernel_size
        self.c_in = c_in
        self.c_out = c_out
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           size=(c_out, c_in, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + ops.reshape(self.bias, (1, self.c_out, 1, 1))
        return out


class BatchNorm(Module):
    """
    バッチ正規化

    学習モードではバッチ統計で正規化して移動平均を更新し、
    推論モードでは移動平均で正規化します。
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        dtype = get_dtype()
        self._buffers['running_mean'] = np.zeros(num_features, dtype=dtype)
        self._buffers['running_var'] = np.ones(num_features, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            stats: Dict[str, np.ndarray] = {}
            out = ops.batch_norm(x, self.gamma, self.beta, eps=self.eps, stats=stats)
            count = stats['count']
            unbiased = stats['var'] * count / max(count - 1, 1)
            m = self.momentum
            self._buffers['running_mean'] = ((1 - m) * self._buffers['running_mean']
                                             + m * stats['mean']).astype(self._buffers['running_mean'].dtype)
            self._buffers['running_var'] = ((1 - m) * self._buffers['running_var']
                                            + m * unbiased).astype(self._buffers['running_var'].dtype)
            return out

        view = (1, self.num_features) if x.ndim == 2 else (1, self.num_features, 1, 1)
        scale = 1.0 / np.sqrt(self._buffers['running_var'] + self.eps)
        shifted = x - Tensor(self._buffers['running_mean'].reshape(view))
        normalized = shifted * Tensor(scale.reshape(view))
        return normalized * ops.reshape(self.gamma, view) + ops.reshape(self.beta, view)


class ConvBlock(Module):
    """畳み込み → バッチ正規化 → ReLU"""

    def __init__(self, conv: Module, channels: int):
        super().__init__()
        self.conv = conv
        self.norm = BatchNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))
