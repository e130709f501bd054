"""
テンソル演算モジュール

各演算は numpy で順伝播を計算し、出力勾配から入力勾配を返すクロージャを
計算グラフに登録します。演算は OPS レジストリに名前で登録され、
forward_op から種別名で呼び出せます。
"""

import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from src.tensor.tensor import (
    ShapeMismatchError,
    Tensor,
    TensorError,
    as_tensor,
    make_result,
)

logger = logging.getLogger(__name__)

OPS: Dict[str, Callable[..., Tensor]] = {}

Scalar = Union[int, float]


def register_op(name: str) -> Callable[[Callable[..., Tensor]], Callable[..., Tensor]]:
    """演算をレジストリに登録するデコレータ"""
    def decorator(func: Callable[..., Tensor]) -> Callable[..., Tensor]:
        if name in OPS:
            raise TensorError(f"演算名が重複しています: {name}")
        OPS[name] = func
        return func
    return decorator


def forward_op(kind: str, inputs: Sequence[Any], **attrs: Any) -> Tensor:
    """
    種別名で演算を実行

    Args:
        kind: 演算種別（'matmul', 'conv2d', 'batch_norm' など）
        inputs: 入力テンソル
        **attrs: 演算属性（stride, padding, axis など）

    Returns:
        出力テンソル
    """
    op = OPS.get(kind)
    if op is None:
        raise TensorError(f"未登録の演算です: {kind}")
    return op(*inputs, **attrs)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストされた勾配を元の形状に縮約"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, f"{a.shape} と {b.shape} はブロードキャストできません")


# ---------------------------------------------------------------------------
# 要素ごとの算術
# ---------------------------------------------------------------------------

@register_op('add')
def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('add', a, b)

    def backward(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result('add', a.data + b.data, (a, b), backward)


@register_op('sub')
def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('sub', a, b)

    def backward(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result('sub', a.data - b.data, (a, b), backward)


@register_op('mul')
def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('mul', a, b)

    def backward(g: np.ndarray):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result('mul', a.data * b.data, (a, b), backward)


@register_op('div')
def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('div', a, b)

    def backward(g: np.ndarray):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_result('div', a.data / b.data, (a, b), backward)


@register_op('neg')
def neg(x: Any) -> Tensor:
    x = as_tensor(x)
    return make_result('neg', -x.data, (x,), lambda g: (-g,))


@register_op('power')
def power(x: Any, exponent: Scalar) -> Tensor:
    x = as_tensor(x)
    out = np.power(x.data, exponent)

    def backward(g: np.ndarray):
        return (g * exponent * np.power(x.data, exponent - 1),)

    return make_result('power', out, (x,), backward)


@register_op('exp')
def exp(x: Any) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result('exp', out, (x,), lambda g: (g * out,))


@register_op('log')
def log(x: Any) -> Tensor:
    x = as_tensor(x)
    return make_result('log', np.log(x.data), (x,), lambda g: (g / x.data,))


@register_op('sqrt')
def sqrt(x: Any) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_result('sqrt', out, (x,), lambda g: (g * 0.5 / out,))


@register_op('abs')
def absolute(x: Any) -> Tensor:
    x = as_tensor(x)
    return make_result('abs', np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


@register_op('clamp')
def clamp(x: Any, low: Optional[Scalar] = None, high: Optional[Scalar] = None) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, low, high)
    inside = np.ones(x.shape, dtype=bool)
    if low is not None:
        inside &= x.data >= low
    if high is not None:
        inside &= x.data <= high

    return make_result('clamp', out, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# 活性化関数
# ---------------------------------------------------------------------------

@register_op('relu')
def relu(x: Any) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result('relu', x.data * mask, (x,), lambda g: (g * mask,))


@register_op('sigmoid')
def sigmoid(x: Any) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return make_result('sigmoid', out, (x,), lambda g: (g * out * (1.0 - out),))


@register_op('silu')
def silu(x: Any) -> Tensor:
    """SiLU(x) = x / (1 + e^{-x})"""
    x = as_tensor(x)
    s = expit(x.data)

    def backward(g: np.ndarray):
        return (g * (s + x.data * s * (1.0 - s)),)

    return make_result('silu', x.data * s, (x,), backward)


@register_op('softmax')
def softmax(x: Any, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result('softmax', out, (x,), backward)


# ---------------------------------------------------------------------------
# 行列積・縮約
# ---------------------------------------------------------------------------

@register_op('matmul')
def matmul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError('matmul', f"2次元以上が必要です: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError('matmul', f"内積次元が一致しません: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError('matmul', f"バッチ次元が一致しません: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result('matmul', np.matmul(a.data, b.data), (a, b), backward)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.ascontiguousarray(np.broadcast_to(g, shape))


@register_op('sum')
def reduce_sum(x: Any, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g: np.ndarray):
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    return make_result('sum', out, (x,), backward)


@register_op('mean')
def reduce_mean(x: Any, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)

    def backward(g: np.ndarray):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return make_result('mean', out, (x,), backward)


@register_op('max')
def reduce_max(x: Any, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.max(axis=axis, keepdims=keepdims))

    def backward(g: np.ndarray):
        full = _expand_reduced(out, x.shape, axis, keepdims)
        mask = (x.data == full).astype(x.dtype)
        count = _expand_reduced(
            np.asarray(mask.sum(axis=axis, keepdims=keepdims)), x.shape, axis, keepdims)
        return (_expand_reduced(g, x.shape, axis, keepdims) * mask / count,)

    return make_result('max', out, (x,), backward)


# ---------------------------------------------------------------------------
# 形状操作
# ---------------------------------------------------------------------------

@register_op('reshape')
def reshape(x: Any, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError('reshape', f"{x.shape} を {tuple(shape)} に変形できません")
    return make_result('reshape', out, (x,), lambda g: (g.reshape(x.shape),))


@register_op('transpose')
def transpose(x: Any, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatchError('transpose', f"軸指定 {tuple(axes)} が {x.ndim} 次元と一致しません")
    inverse = np.argsort(axes)
    return make_result('transpose', np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inverse),))


@register_op('concat')
def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError('concat', "入力が空です")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeMismatchError(
                'concat', f"軸{ax}以外の次元が一致しません: {[u.shape for u in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    boundaries = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, boundaries, axis=ax))

    return make_result('concat', np.concatenate([t.data for t in tensors], axis=ax),
                       tuple(tensors), backward)


@register_op('getitem')
def getitem(x: Any, index: Any) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result('getitem', out, (x,), backward)


@register_op('pad2d')
def pad2d(x: Any, padding: int) -> Tensor:
    """末尾2次元（h, w）をゼロ埋め"""
    x = as_tensor(x)
    if padding <= 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    out = np.pad(x.data, widths)
    p = padding

    return make_result('pad2d', out, (x,), lambda g: (g[..., p:-p, p:-p],))


# ---------------------------------------------------------------------------
# 畳み込み・プーリング
# ---------------------------------------------------------------------------

@register_op('conv2d')
def conv2d(x: Any, weight: Any, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2次元畳み込み（既定は valid、padding でゼロ埋め）

    Args:
        x: 入力 (b, c_in, h, w)
        weight: カーネル (c_out, c_in, k, k)
        stride: ストライド
        padding: ゼロ埋め幅
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError('conv2d', f"入力 {x.shape} / カーネル {weight.shape} は4次元が必要です")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            'conv2d', f"入力チャネル {x.shape[1]} とカーネル入力チャネル {weight.shape[1]} が一致しません")

    xp = np.pad(x.data, [(0, 0), (0, 0), (padding, padding), (padding, padding)]) if padding else x.data
    b, _, height, width = xp.shape
    c_out, c_in, kh, kw = weight.shape
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1
    if height < kh or width < kw:
        raise ShapeMismatchError(
            'conv2d', f"入力 {height}x{width} がカーネル {kh}x{kw} より小さいです")

    def window(m: int, n: int):
        return (slice(None), slice(None),
                slice(m, m + stride * (out_h - 1) + 1, stride),
                slice(n, n + stride * (out_w - 1) + 1, stride))

    out = np.zeros((b, c_out, out_h, out_w), dtype=np.result_type(xp, weight.data))
    for m in range(kh):
        for n in range(kw):
            patch = xp[window(m, n)]
            out += np.tensordot(weight.data[:, :, m, n], patch, axes=([1], [1])).transpose(1, 0, 2, 3)

    def backward(g: np.ndarray):
        grad_w = np.zeros_like(weight.data)
        grad_xp = np.zeros_like(xp)
        for m in range(kh):
            for n in range(kw):
                idx = window(m, n)
                grad_w[:, :, m, n] = np.tensordot(g, xp[idx], axes=([0, 2, 3], [0, 2, 3]))
                grad_xp[idx] += np.tensordot(g, weight.data[:, :, m, n], axes=([1], [0])).transpose(0, 3, 1, 2)
        if padding:
            grad_xp = grad_xp[:, :, padding:-padding, padding:-padding]
        return grad_xp, grad_w

    return make_result('conv2d', out, (x, weight), backward)


@register_op('avg_pool2d')
def avg_pool2d(x: Any, factor: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError('avg_pool2d', f"入力は4次元が必要です: {x.shape}")
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeMismatchError('avg_pool2d', f"{h}x{w} は係数 {factor} で割り切れません")
    out = x.data.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(g: np.ndarray):
        expanded = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (expanded / (factor * factor),)

    return make_result('avg_pool2d', out, (x,), backward)


@register_op('upsample_nearest')
def upsample_nearest(x: Any, factor: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError('upsample_nearest', f"入力は4次元が必要です: {x.shape}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g: np.ndarray):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result('upsample_nearest', out, (x,), backward)


# ---------------------------------------------------------------------------
# 正規化
# ---------------------------------------------------------------------------

@register_op('batch_norm')
def batch_norm(x: Any, gamma: Any, beta: Any, eps: float = 1e-5,
               stats: Optional[Dict[str, np.ndarray]] = None) -> Tensor:
    """
    学習モードのバッチ正規化（チャネル軸は1）

    (N, C) はバッチ方向、(N, C, H, W) はバッチと空間方向で統計を取ります。
    N=1 の場合も空間方向の統計で正規化されます。

    Args:
        stats: 指定時はバッチ平均・分散・標本数を書き込む
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ShapeMismatchError('batch_norm', f"入力は2次元または4次元が必要です: {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(
            'batch_norm', f"チャネル数 {channels} と affine パラメータ {gamma.shape} が一致しません")

    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
    count = x.data.size // channels

    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data.reshape(view) + beta.data.reshape(view)

    if stats is not None:
        stats['mean'] = mean.reshape(channels)
        stats['var'] = var.reshape(channels)
        stats['count'] = count

    def backward(g: np.ndarray):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        dx_hat = g * gamma.data.reshape(view)
        grad_x = (inv_std / count) * (
            count * dx_hat
            - dx_hat.sum(axis=axes, keepdims=True)
            - x_hat * (dx_hat * x_hat).sum(axis=axes, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return make_result('batch_norm', out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# インデックス集約
# ---------------------------------------------------------------------------

@register_op('segment_max')
def segment_max(x: Any, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """
    行ごとのセグメント最大値 (M, C) → (num_segments, C)

    同値の場合は先頭行へ勾配を流します。空セグメントは 0 です。
    """
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if x.ndim != 2 or segment_ids.shape != (x.shape[0],):
        raise ShapeMismatchError(
            'segment_max', f"入力 {x.shape} とセグメントID {segment_ids.shape} が一致しません")
    rows, channels = x.shape

    out = np.full((num_segments, channels), -np.inf, dtype=x.dtype)
    np.maximum.at(out, segment_ids, x.data)

    winners = np.full((num_segments, channels), rows, dtype=np.int64)
    is_max = x.data == out[segment_ids]
    candidates = np.where(is_max, np.arange(rows)[:, None], rows)
    np.minimum.at(winners, segment_ids, candidates)
    empty = winners[:, 0] == rows
    out[empty] = 0.0

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        filled = ~empty
        cols = np.broadcast_to(np.arange(channels), (int(filled.sum()), channels))
        np.add.at(grad, (winners[filled], cols), g[filled])
        return (grad,)

    return make_result('segment_max', out, (x,), backward)


@register_op('index_add')
def index_add(values: Any, index: np.ndarray, size: int) -> Tensor:
    """
    行を index 位置へ加算集約 (N, ...) → (size, ...)

    散布（scatter）と最近傍セルへのスプラットに使用します。
    """
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (values.shape[0],):
        raise ShapeMismatchError('index_add', f"値 {values.shape} とインデックス {index.shape} が一致しません")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeMismatchError('index_add', f"インデックスが範囲 [0, {size}) の外にあります")
    out = np.zeros((size,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values.data)

    return make_result('index_add', out, (values,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# Tensor への演算子の取り付け
# ---------------------------------------------------------------------------

def _install_operators() -> None:
    Tensor.__add__ = lambda self, other: add(self, other)
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = lambda self, other: sub(self, other)
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = lambda self, other: mul(self, other)
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__truediv__ = lambda self, other: div(self, other)
    Tensor.__rtruediv__ = lambda self, other: div(other, self)
    Tensor.__neg__ = lambda self: neg(self)
    Tensor.__pow__ = lambda self, exponent: power(self, exponent)
    Tensor.__matmul__ = lambda self, other: matmul(self, other)
    Tensor.__getitem__ = lambda self, index: getitem(self, index)
    Tensor.sum = lambda self, axis=None, keepdims=False: reduce_sum(self, axis, keepdims)
    Tensor.mean = lambda self, axis=None, keepdims=False: reduce_mean(self, axis, keepdims)
    Tensor.max = lambda self, axis=None, keepdims=False: reduce_max(self, axis, keepdims)
    Tensor.reshape = lambda self, *shape: reshape(
        self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    Tensor.transpose = lambda self, *axes: transpose(
        self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))


_install_operators()
