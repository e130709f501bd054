"""
勾配検証モジュール

登録された各演算・ブロックについて、逆伝播の解析勾配を中心差分（64ビット、刻み 1e-5）と比較します。
相対誤差は ‖解析 − 数値‖ / max(‖解析‖, ‖数値‖, NORM_FLOOR) で、パラメータごとに最大値を報告します。
±刻み の範囲に折れ点（ReLU・スプラインのクランプ）をまたぐ要素は比較から除きます。
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.detection.boxes import Box3D
from src.detection.head import DetectionHead, HeadOutput
from src.detection.loss import detection_loss
from src.encoders.camera import CameraModel, DepthBinConfig, KanvTransform
from src.encoders.pillars import PillarGridConfig, PointCloud, pillarize
from src.encoders.point_encoder import PointEncoder
from src.fusion.cross_attn import CameraLidarCrossAttn, MultiHeadCrossAttention
from src.fusion.bev import embed_bev
from src.fusion.fuser import ConvKanFuser
from src.kan.kan_conv import KanConv2d
from src.kan.kan_layer import KanActivation, KanLayer, eval_phi
from src.kan.spline import SplineGrid
from src.tensor import ops
from src.tensor.layers import BatchNorm, Linear, Module
from src.tensor.tensor import Tensor, get_precision, no_grad, precision
from src.utils.seeding import derive_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5
DEFAULT_MAX_ENTRIES = 24
# ノルムの下限。真の勾配が 0 のテンソルは実質的に絶対誤差で比較する
NORM_FLOOR = 1e-3
# 片側差分の食い違いがこれを超える要素は ±step 内に折れ点（ReLU・クランプ）がある
KINK_TOLERANCE = 1e-2
CORRUPTION_SCALE = 1.1
CORRUPTION_SHIFT = 1e-3

SCOPES = ('tensor', 'kan', 'encoders', 'fusion', 'detection')

# 戻り値: (スカラー損失を計算する関数, 検証対象の葉テンソル)
CaseBuilder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


class GradCheckError(Exception):
    """勾配検証の設定エラー"""
    pass


@dataclass
class GradCheckCase:
    name: str
    scope: str
    build: CaseBuilder


@dataclass
class GradCheckResult:
    """1ケースの検証結果"""
    name: str
    scope: str
    max_rel_error: float
    passed: bool
    per_tensor: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'op': self.name,
            'scope': self.scope,
            'max_rel_error': float(self.max_rel_error),
            'passed': bool(self.passed),
            'per_tensor': {k: float(v) for k, v in self.per_tensor.items()},
            'seconds': round(self.seconds, 3),
        }


REGISTRY: Dict[str, GradCheckCase] = {}


def register_check(name: str, scope: str) -> Callable[[CaseBuilder], CaseBuilder]:
    """勾配検証ケースを登録するデコレータ"""
    if scope not in SCOPES:
        raise GradCheckError(f"未知のスコープです: {scope}")

    def decorator(build: CaseBuilder) -> CaseBuilder:
        if name in REGISTRY:
            raise GradCheckError(f"勾配検証ケースが重複しています: {name}")
        REGISTRY[name] = GradCheckCase(name, scope, build)
        return build
    return decorator


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖解析 − 数値‖ / max(‖解析‖, ‖数値‖, NORM_FLOOR)"""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(diff / scale)


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, indices: Sequence[Tuple[int, ...]],
                     step: float = DEFAULT_STEP, with_kinks: bool = False):
    """
    指定要素の中心差分勾配

    with_kinks=True のときは (勾配, 折れ点マスク) を返す。
    前進差分と後退差分が KINK_TOLERANCE を超えて食い違う要素を折れ点とみなす。
    """
    values = np.zeros(len(indices))
    kinks = np.zeros(len(indices), dtype=bool)
    with no_grad():
        f_center = float(fn().item())
        for k, index in enumerate(indices):
            original = tensor.data[index]
            tensor.data[index] = original + step
            f_plus = float(fn().item())
            tensor.data[index] = original - step
            f_minus = float(fn().item())
            tensor.data[index] = original
            values[k] = (f_plus - f_minus) / (2.0 * step)
            forward = (f_plus - f_center) / step
            backward = (f_center - f_minus) / step
            kinks[k] = abs(forward - backward) > KINK_TOLERANCE * max(1.0, abs(values[k]))
    if with_kinks:
        return values, kinks
    return values


def _sample_indices(shape: Tuple[int, ...], rng: np.random.Generator,
                    max_entries: int) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape)) if shape else 1
    flat = np.arange(size) if size <= max_entries else np.sort(rng.choice(size, max_entries, replace=False))
    return [np.unravel_index(int(i), shape) if shape else () for i in flat]


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], rng: np.random.Generator,
                    max_entries: int = DEFAULT_MAX_ENTRIES, step: float = DEFAULT_STEP,
                    corrupt: bool = False) -> Dict[str, float]:
    """
    解析勾配と数値勾配を比較

    Returns:
        テンソル名 → 相対誤差
    """
    for tensor in tensors:
        tensor.grad = None
    loss = fn()
    loss.backward()

    errors: Dict[str, float] = {}
    for i, tensor in enumerate(tensors):
        if tensor.grad is None:
            raise GradCheckError(f"勾配が計算されていません: {tensor.name or i}")
        indices = _sample_indices(tensor.shape, rng, max_entries)
        analytic = np.array([tensor.grad[index] for index in indices], dtype=np.float64)
        if corrupt:
            analytic = analytic * CORRUPTION_SCALE + CORRUPTION_SHIFT
        numeric, kinks = numeric_gradient(fn, tensor, indices, step, with_kinks=True)
        name = tensor.name or f"input{i}"
        if kinks.any():
            logger.debug(f"{name}: 折れ点をまたぐ {int(kinks.sum())}/{len(indices)} 要素を比較から除外")
        keep = ~kinks
        errors[name] = relative_error(analytic[keep], numeric[keep]) if keep.any() else 0.0
    return errors


def _leaf(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _module_leaves(module: Module, inputs: Iterable[Tensor] = ()) -> List[Tensor]:
    leaves = list(inputs)
    for name, param in module.named_parameters():
        param.name = name
        leaves.append(param)
    return leaves


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.reduce_sum(ops.mul(out, Tensor(weights)))


def _tiny_grid() -> SplineGrid:
    return SplineGrid(lower=-1.0, upper=1.0, grid_size=3, spline_order=3)


@register_check('matmul', 'tensor')
def _case_matmul(rng):
    a = _leaf(rng.normal(size=(3, 4)), 'a')
    b = _leaf(rng.normal(size=(4, 2)), 'b')
    r = rng.normal(size=(3, 2))
    return (lambda: _weighted_sum(ops.matmul(a, b), r)), [a, b]


@register_check('elementwise', 'tensor')
def _case_elementwise(rng):
    x = _leaf(rng.uniform(0.5, 2.0, size=(2, 3)), 'x')
    y = _leaf(rng.uniform(0.5, 2.0, size=(2, 3)), 'y')
    r = rng.normal(size=(2, 3))

    def fn():
        out = ops.div(ops.mul(ops.exp(x), ops.log(y)), ops.sqrt(ops.add(x, y)))
        return _weighted_sum(ops.sub(out, ops.power(x, 3)), r)
    return fn, [x, y]


@register_check('activations', 'tensor')
def _case_activations(rng):
    x = _leaf(rng.normal(size=(3, 5)), 'x')
    r = rng.normal(size=(3, 5))
    return (lambda: _weighted_sum(ops.softmax(ops.silu(x), axis=1) + ops.sigmoid(x), r)), [x]


@register_check('mlp_composite', 'tensor')
def _case_mlp(rng):
    layers = [Linear(4, 5, 'relu', rng=rng), Linear(5, 5, 'silu', rng=rng), Linear(5, 2, rng=rng)]
    x = _leaf(rng.normal(size=(6, 4)), 'x')
    r = rng.normal(size=(6, 2))

    def fn():
        h = x
        for layer in layers:
            h = layer(h)
        return _weighted_sum(h, r)
    leaves = [x]
    for i, layer in enumerate(layers):
        leaves.extend(_module_leaves(layer))
        for p in layer.parameters():
            p.name = f"layer{i}.{p.name}"
    return fn, leaves


@register_check('conv2d', 'tensor')
def _case_conv2d(rng):
    x = _leaf(rng.normal(size=(2, 2, 5, 5)), 'x')
    w = _leaf(rng.normal(size=(3, 2, 3, 3)), 'weight')
    r = rng.normal(size=(2, 3, 3, 3))
    return (lambda: _weighted_sum(ops.conv2d(x, w, stride=2, padding=1), r)), [x, w]


@register_check('batch_norm', 'tensor')
def _case_batch_norm(rng):
    norm = BatchNorm(3)
    norm.gamma.data = rng.uniform(0.5, 1.5, size=3)
    norm.beta.data = rng.normal(size=3)
    x = _leaf(rng.normal(size=(4, 3, 2, 2)), 'x')
    r = rng.normal(size=(4, 3, 2, 2))
    return (lambda: _weighted_sum(norm(x), r)), _module_leaves(norm, [x])


@register_check('pool_upsample_reduce', 'tensor')
def _case_pool(rng):
    x = _leaf(rng.normal(size=(1, 2, 4, 4)), 'x')
    r = rng.normal(size=(1, 2, 4, 4))

    def fn():
        pooled = ops.avg_pool2d(x, 2)
        up = ops.upsample_nearest(ops.mul(pooled, pooled), 2)
        return _weighted_sum(up, r) + ops.reduce_mean(x) + ops.reduce_sum(ops.reduce_max(x, axis=1))
    return fn, [x]


@register_check('segment_scatter', 'tensor')
def _case_segments(rng):
    x = _leaf(rng.normal(size=(7, 3)), 'x')
    segments = np.array([0, 0, 1, 2, 2, 2, 1])
    index = np.array([3, 0, 1])
    r = rng.normal(size=(4, 3))
    return (lambda: _weighted_sum(ops.index_add(ops.segment_max(x, segments, 3), index, 4), r)), [x]


@register_check('eval_phi', 'kan')
def _case_eval_phi(rng):
    grid = _tiny_grid()
    x = _leaf(rng.uniform(-0.9, 0.9, size=(5,)), 'x')
    w_b = _leaf(np.array(rng.normal()), 'w_b')
    w_s = _leaf(np.array(rng.normal()), 'w_s')
    coeffs = _leaf(rng.normal(size=grid.num_basis), 'coeffs')
    act = KanActivation(w_b, w_s, coeffs, grid)
    r = rng.normal(size=(5,))
    return (lambda: _weighted_sum(eval_phi(x, act), r)), [x, w_b, w_s, coeffs]


@register_check('kan_layer', 'kan')
def _case_kan_layer(rng):
    layer = KanLayer(3, 2, grid=_tiny_grid(), rng=rng)
    layer.w_b.data = rng.normal(size=layer.w_b.shape)
    layer.w_s.data = rng.normal(size=layer.w_s.shape)
    z = _leaf(rng.uniform(-0.9, 0.9, size=(4, 3)), 'z')
    r = rng.normal(size=(4, 2))
    return (lambda: _weighted_sum(layer(z), r)), _module_leaves(layer, [z])


@register_check('kan_conv', 'kan')
def _case_kan_conv(rng):
    kernel = KanConv2d(2, 2, kernel_size=3, padding=1, grid=_tiny_grid(), rng=rng)
    kernel.w_b.data = rng.normal(size=kernel.w_b.shape)
    kernel.w_s.data = rng.normal(size=kernel.w_s.shape)
    x = _leaf(rng.uniform(-0.9, 0.9, size=(1, 2, 4, 4)), 'x')
    r = rng.normal(size=(1, 2, 4, 4))
    return (lambda: _weighted_sum(kernel(x), r)), _module_leaves(kernel, [x])


def _tiny_bev() -> PillarGridConfig:
    return PillarGridConfig(x_min=0.0, x_max=16.0, y_min=-8.0, y_max=8.0, cell_size=4.0,
                            max_pillars=16, max_points_per_pillar=4)


@register_check('point_encoder', 'encoders')
def _case_point_encoder(rng):
    bev = _tiny_bev()
    points = np.column_stack([rng.uniform(0.5, 15.5, 24), rng.uniform(-7.5, 7.5, 24),
                              rng.uniform(0.0, 2.0, 24), rng.uniform(0.0, 1.0, 24)])
    grid = pillarize(PointCloud(points.astype(np.float32)), bev, seed=0)
    encoder = PointEncoder(3, 2, use_kan=True, grid=_tiny_grid(), rng=rng)
    r = rng.normal(size=(1, 2, bev.height, bev.width))
    return (lambda: _weighted_sum(encoder([grid]), r)), _module_leaves(encoder)


@register_check('kanv_transform', 'encoders')
def _case_kanv_transform(rng):
    bev = _tiny_bev()
    cam = CameraModel.roadside(height=7.0, pitch_deg=12.0, image_size=(16, 16), focal=8.0,
                               depth=DepthBinConfig(d_min=2.0, d_max=30.0, bins=4))
    transform = KanvTransform(2, 2, 2, depth_bins=4, use_kan=True, grid=_tiny_grid(), rng=rng)
    feat = _leaf(rng.normal(size=(1, 2, 8, 8)), 'feat')
    r = rng.normal(size=(1, 2, bev.height, bev.width))
    return (lambda: _weighted_sum(transform(feat, [cam], bev), r)), _module_leaves(transform, [feat])


@register_check('cross_attention', 'fusion')
def _case_cross_attention(rng):
    attention = MultiHeadCrossAttention(4, 2, rng=rng)
    query = _leaf(rng.normal(size=(1, 4, 2, 2)), 'query')
    key_value = _leaf(rng.normal(size=(1, 4, 2, 2)), 'key_value')
    r = rng.normal(size=(1, 4, 4))

    def fn():
        out = attention(embed_bev(query), embed_bev(key_value))
        return _weighted_sum(out.sequence, r)
    return fn, _module_leaves(attention, [query, key_value])


@register_check('cross_attn_block', 'fusion')
def _case_cross_attn_block(rng):
    block = CameraLidarCrossAttn(channels=4, heads=2, factor=2, rng=rng)
    lidar = _leaf(rng.normal(size=(1, 4, 4, 4)), 'lidar')
    camera = _leaf(rng.normal(size=(1, 4, 4, 4)), 'camera')
    r = rng.normal(size=(1, 4, 4, 4))
    return (lambda: _weighted_sum(block(lidar, camera), r)), _module_leaves(block, [lidar, camera])


@register_check('conv_kan_fuser', 'fusion')
def _case_fuser(rng):
    fuser = ConvKanFuser(2, 2, 2, use_kan=True, grid=_tiny_grid(), rng=rng)
    lidar = _leaf(rng.normal(size=(1, 2, 3, 3)), 'lidar')
    camera = _leaf(rng.normal(size=(1, 2, 3, 3)), 'camera')
    r = rng.normal(size=(1, 2, 3, 3))
    return (lambda: _weighted_sum(fuser(lidar, camera), r)), _module_leaves(fuser, [lidar, camera])


@register_check('detection_head', 'detection')
def _case_head(rng):
    head = DetectionHead(3, num_classes=3, hidden=4, rng=rng)
    fused = _leaf(rng.normal(size=(1, 3, 4, 4)), 'fused')
    r_heat = rng.normal(size=(1, 3, 4, 4))
    r_reg = rng.normal(size=(1, 8, 4, 4))

    def fn():
        out = head(fused)
        return _weighted_sum(out.heatmap, r_heat) + _weighted_sum(out.regression, r_reg)
    return fn, _module_leaves(head, [fused])


@register_check('detection_loss', 'detection')
def _case_loss(rng):
    bev = _tiny_bev()
    boxes = [Box3D(6.0, -2.0, 0.8, 1.8, 4.5, 1.6, 0.3, label=0),
             Box3D(10.0, 5.0, 0.9, 0.7, 0.7, 1.75, -1.0, label=2)]
    heat_logits = _leaf(rng.normal(size=(1, 3, bev.height, bev.width)), 'heat_logits')
    regression = _leaf(rng.normal(size=(1, 8, bev.height, bev.width)), 'regression')

    def fn():
        return detection_loss(HeadOutput(ops.sigmoid(heat_logits), regression), boxes, bev)
    return fn, [heat_logits, regression]


def select_cases(scope: str = 'all', names: Optional[Sequence[str]] = None) -> List[GradCheckCase]:
    """スコープ・名前で検証ケースを選択"""
    if scope != 'all' and scope not in SCOPES:
        raise GradCheckError(f"未知のスコープです: {scope}（選択肢: all, {', '.join(SCOPES)}）")
    cases = [c for c in REGISTRY.values() if scope == 'all' or c.scope == scope]
    if names:
        unknown = sorted(set(names) - set(REGISTRY))
        if unknown:
            raise GradCheckError(f"未知の検証ケースです: {unknown}")
        cases = [c for c in cases if c.name in names]
    return cases


def run_gradcheck(scope: str = 'all', tolerance: float = DEFAULT_TOLERANCE, seed: int = 0,
                  corrupt: Sequence[str] = (), max_entries: int = DEFAULT_MAX_ENTRIES,
                  names: Optional[Sequence[str]] = None) -> List[GradCheckResult]:
    """
    勾配検証を実行（64ビット精度で実行する）

    Args:
        scope: 'all' または SCOPES のいずれか
        tolerance: 合格とする最大相対誤差
        seed: 入力生成シード
        corrupt: 解析勾配を意図的に崩すケース名（検証器の自己テスト用）
        max_entries: テンソルごとに比較する要素数の上限

    Returns:
        ケースごとの結果
    """
    unknown = sorted(set(corrupt) - set(REGISTRY))
    if unknown:
        raise GradCheckError(f"未知の検証ケースです: {unknown}")
    if get_precision() != 'f64':
        logger.info("勾配検証は64ビット精度で実行します")

    results = []
    with precision('f64'):
        for case in select_cases(scope, names):
            rng = derive_rng(seed, case.name)
            started = time.perf_counter()
            fn, tensors = case.build(rng)
            errors = check_gradients(fn, tensors, rng, max_entries=max_entries,
                                     corrupt=case.name in corrupt)
            worst = max(errors.values()) if errors else 0.0
            result = GradCheckResult(case.name, case.scope, worst, worst < tolerance, errors,
                                     time.perf_counter() - started)
            status = 'OK' if result.passed else 'NG'
            log = logger.info if result.passed else logger.error
            log(f"[{status}] {case.scope}/{case.name}: 最大相対誤差={worst:.3e}")
            results.append(result)
    return results
