"""
テンソルコアモジュール

numpy配列を保持する Tensor と、リバースモード自動微分の計算グラフを提供します。
演算本体は src.tensor.ops に定義され、各演算は逆伝播関数を持つ Node を結果に付与します。
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# 数値精度（f64: テスト・勾配検査用、f32: 学習用）
PRECISIONS = {
    'f32': np.float32,
    'f64': np.float64,
}

_precision_state = {'name': 'f64'}
_grad_mode = threading.local()


class TensorError(Exception):
    """テンソル演算関連のエラー"""
    pass


class ShapeMismatchError(TensorError):
    """形状不一致エラー（演算名と次元を保持）"""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"[{op}] 形状が不正です: {message}")


class GraphError(TensorError):
    """計算グラフ関連のエラー"""
    pass


def set_precision(name: str) -> None:
    """
    既定の数値精度を設定

    Args:
        name: 'f32' または 'f64'
    """
    if name not in PRECISIONS:
        raise TensorError(f"未対応の精度です: {name}（f32 / f64 のいずれか）")
    _precision_state['name'] = name
    logger.debug(f"数値精度を設定しました: {name}")


def get_precision() -> str:
    """現在の数値精度名を取得"""
    return _precision_state['name']


def get_dtype() -> np.dtype:
    """現在の数値精度に対応する numpy dtype を取得"""
    return np.dtype(PRECISIONS[_precision_state['name']])


@contextmanager
def precision(name: str) -> Iterator[None]:
    """一時的に数値精度を切り替えるコンテキスト"""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    """勾配記録が有効かどうか（スレッドごと）"""
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """計算グラフを記録しないコンテキスト"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Node:
    """計算グラフのノード"""

    __slots__ = ('op', 'parents', 'backward_fn', 'consumed')

    def __init__(self, op: str, parents: Tuple['Tensor', ...],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """自動微分対応の多次元配列"""

    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False,
                 name: Optional[str] = None, dtype: Optional[np.dtype] = None):
        """
        Tensor初期化

        Args:
            data: 配列に変換可能な値
            requires_grad: 勾配を保持する葉テンソルかどうか
            name: パラメータ名など任意の名前
            dtype: 明示する dtype（省略時は現在の精度）
        """
        self.data: np.ndarray = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        """コピーせずに配列を包む（演算結果用）"""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        """保持している配列を取得"""
        return self.data

    def item(self) -> float:
        """スカラー値を取得"""
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def zero_grad(self) -> None:
        """勾配をクリア"""
        self.grad = None

    def detach(self) -> 'Tensor':
        """グラフから切り離したテンソルを取得"""
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def backward(self, retain_graph: bool = False) -> None:
        """
        スカラー損失から逆伝播し、葉テンソルの grad を埋める

        Args:
            retain_graph: True の場合はグラフを保持（既定は消費）

        Raises:
            GraphError: 非スカラー損失、または消費済みグラフへの再逆伝播
        """
        if self.data.size != 1:
            raise GraphError(f"逆伝播はスカラー損失のみ対応しています: shape={self.shape}")

        seed = np.ones_like(self.data)
        if self.node is None:
            if not self.requires_grad:
                raise GraphError("勾配を記録した計算グラフがありません")
            self.grad = seed if self.grad is None else self.grad + seed
            return
        if self.node.consumed:
            raise GraphError("計算グラフは既に消費されています（retain_graph=True が必要です）")

        order = _topological_order(self)
        grads = {id(self): seed}

        for tensor in order:
            grad = grads.pop(id(tensor), None)
            if grad is None:
                continue

            node = tensor.node
            if node is None:
                if tensor.requires_grad:
                    tensor.grad = grad if tensor.grad is None else tensor.grad + grad
                continue

            if node.consumed:
                raise GraphError(f"消費済みのノードに到達しました: {node.op}")

            parent_grads = node.backward_fn(grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

            if not retain_graph:
                node.consumed = True
                node.backward_fn = None
                node.parents = ()


def _topological_order(root: Tensor) -> List[Tensor]:
    """出力から葉へ向かう位相順（反復DFS）"""
    visited = set()
    order: List[Tensor] = []
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    order.reverse()
    return order


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """
    演算結果テンソルを生成し、必要ならグラフに記録

    Args:
        op: 演算名
        data: 出力配列
        parents: 入力テンソル
        backward_fn: 出力勾配 → 各入力の勾配（不要なら None）

    Returns:
        結果テンソル
    """
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def as_tensor(value: Any) -> Tensor:
    """Tensor 以外の値を定数テンソルに変換"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)
