"""
カメラブランチモジュール

カメラモデル、固定の小さな畳み込みバックボーン、KANvtransform
（downsample → depthnet → dtransform → lift/splat）を提供します。
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.encoders.pillars import PillarGridConfig
from src.kan.kan_conv import KanConv2d
from src.kan.spline import SplineGrid
from src.tensor import ops
from src.tensor.layers import BatchNorm, Conv2d, ConvBlock, Module
from src.tensor.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

# KanvTransform が保持する視錐台ジオメトリの上限（古いものから捨てる）
GEOMETRY_CACHE_SIZE = 8


class CameraModelError(Exception):
    """カメラモデルのエラー"""
    pass


class LiftError(Exception):
    """BEV への持ち上げ（lift/splat）のエラー"""
    pass


@dataclass(frozen=True)
class DepthBinConfig:
    """深度ビン設定（ビン中心を使用）"""
    d_min: float = 2.0
    d_max: float = 80.0
    bins: int = 32

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max) or self.bins < 1:
            raise CameraModelError(f"深度ビン設定が不正です: {self.d_min}〜{self.d_max} m, D={self.bins}")

    def centers(self) -> np.ndarray:
        step = (self.d_max - self.d_min) / self.bins
        return self.d_min + (np.arange(self.bins) + 0.5) * step


@dataclass
class CameraModel:
    """ピンホールカメラ（姿勢は world→camera: X_c = R X_w + t）"""
    intrinsic: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: Tuple[int, int] = (64, 96)
    depth: DepthBinConfig = field(default_factory=DepthBinConfig)

    def __post_init__(self):
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if abs(np.linalg.det(self.intrinsic)) < 1e-12:
            raise CameraModelError("内部パラメータ行列が正則ではありません")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise CameraModelError("回転行列が正規直交ではありません")

    @classmethod
    def roadside(cls, height: float = 7.0, pitch_deg: float = 12.0, image_size=(64, 96),
                 focal: float = 48.0, position_xy=(0.0, 0.0),
                 depth: Optional[DepthBinConfig] = None) -> 'CameraModel':
        """
        路側設置カメラ（+x 方向を向き、pitch_deg だけ下向き）

        カメラ座標は x 右、y 下、z 前方。
        """
        h_img, w_img = image_size
        intrinsic = np.array([[focal, 0.0, (w_img - 1) / 2.0],
                              [0.0, focal, (h_img - 1) / 2.0],
                              [0.0, 0.0, 1.0]])
        # world (x 前, y 左, z 上) → 水平カメラ
        level = np.array([[0.0, -1.0, 0.0],
                          [0.0, 0.0, -1.0],
                          [1.0, 0.0, 0.0]])
        p = math.radians(pitch_deg)
        tilt = np.array([[1.0, 0.0, 0.0],
                         [0.0, math.cos(p), -math.sin(p)],
                         [0.0, math.sin(p), math.cos(p)]])
        rotation = tilt @ level
        center = np.array([position_xy[0], position_xy[1], height])
        return cls(intrinsic, rotation, -rotation @ center, image_size, depth or DepthBinConfig())

    @property
    def center(self) -> np.ndarray:
        """カメラ中心（world 座標）"""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        world 点 (N×3) を画像へ投影

        Returns:
            (uv (N×2), 深度 z_c (N,))
        """
        cam = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        depth = cam[:, 2]
        with np.errstate(divide='ignore', invalid='ignore'):
            uvw = cam @ self.intrinsic.T
            uv = uvw[:, :2] / uvw[:, 2:3]
        return uv, depth

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """画素 (N×2) と深度 z_c (N,) から world 点 (N×3)"""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        rays = np.concatenate([uv, np.ones((uv.shape[0], 1))], axis=1) @ np.linalg.inv(self.intrinsic).T
        cam = rays * np.asarray(depth, dtype=np.float64).reshape(-1, 1)
        return (cam - self.translation) @ self.rotation

    def to_dict(self) -> dict:
        return {
            'intrinsic': self.intrinsic.tolist(),
            'rotation': self.rotation.tolist(),
            'translation': self.translation.tolist(),
            'image_size': list(self.image_size),
            'depth': {'d_min': self.depth.d_min, 'd_max': self.depth.d_max, 'bins': self.depth.bins},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'CameraModel':
        return cls(
            intrinsic=np.array(data['intrinsic']),
            rotation=np.array(data['rotation']),
            translation=np.array(data['translation']),
            image_size=tuple(data['image_size']),
            depth=DepthBinConfig(**data['depth']),
        )


class CameraBackboneStub(Module):
    """2段のストライド2畳み込みブロック（バイアスなし）"""

    def __init__(self, in_channels: int = 8, out_channels: int = 32,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        mid = max(out_channels // 2, 1)
        self.block1 = ConvBlock(Conv2d(in_channels, mid, 3, stride=2, padding=1, rng=rng), mid)
        self.block2 = ConvBlock(Conv2d(mid, out_channels, 3, stride=2, padding=1, rng=rng), out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return camera_backbone_stub(x, self)


def camera_backbone_stub(x: Tensor, backbone: CameraBackboneStub) -> Tensor:
    """
    カメラ特徴画像 (b, c₀, H, W) → (b, c_f, H/4, W/4)

    Raises:
        CameraModelError: 入力チャネル数の不一致
    """
    x = as_tensor(x)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    if x.shape[1] != backbone.in_channels:
        raise CameraModelError(f"入力チャネル数 {x.shape[1]} が {backbone.in_channels} と一致しません")
    return backbone.block2(backbone.block1(x))


def make_conv(c_in: int, c_out: int, use_kan: bool, grid: SplineGrid,
              rng: np.random.Generator, bias: bool = False) -> Module:
    """3×3 同サイズ畳み込み（KANConv または通常畳み込み）"""
    if use_kan:
        return KanConvUnit(c_in, c_out, grid, rng)
    return Conv2d(c_in, c_out, 3, padding=1, bias=bias, rng=rng)


class KanConvUnit(Module):
    """前正規化 → KANConv（3×3, 同サイズ）"""

    def __init__(self, c_in: int, c_out: int, grid: SplineGrid, rng: np.random.Generator):
        super().__init__()
        self.pre_norm = BatchNorm(c_in)
        self.conv = KanConv2d(c_in, c_out, kernel_size=3, padding=1, grid=grid, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(self.pre_norm(x))


@dataclass
class FrustumGeometry:
    """lift サンプルごとの BEV セル（平坦化インデックス、範囲外は -1）"""
    cell_index: np.ndarray   # (D·fh·fw,)
    feature_size: Tuple[int, int]

    @property
    def valid(self) -> np.ndarray:
        return self.cell_index >= 0


def frustum_geometry(cam: CameraModel, feature_size: Tuple[int, int],
                     bev: PillarGridConfig) -> FrustumGeometry:
    """
    特徴画素 × 深度ビンの3D位置から最近傍 BEV セルを求める

    特徴画素 (i, j) の中心は画像座標 u = (j+0.5)·W/fw − 0.5, v = (i+0.5)·H/fh − 0.5。

    Raises:
        LiftError: どのサンプルも BEV 範囲に入らない
    """
    fh, fw = feature_size
    h_img, w_img = cam.image_size
    u = (np.arange(fw) + 0.5) * w_img / fw - 0.5
    v = (np.arange(fh) + 0.5) * h_img / fh - 0.5
    depths = cam.depth.centers()

    dd, vv, uu = np.meshgrid(depths, v, u, indexing='ij')
    world = cam.unproject(np.stack([uu.ravel(), vv.ravel()], axis=1), dd.ravel())

    ix, iy = bev.cell_of(world[:, 0], world[:, 1])
    inside = bev.in_extent(world[:, 0], world[:, 1])
    cell = np.where(inside, iy * bev.width + ix, -1)
    if not np.any(inside):
        raise LiftError("BEV 範囲と交差するカメラ光線がありません（設定を確認してください）")
    return FrustumGeometry(cell.astype(np.int64), (fh, fw))


def lift_splat(depth_prob: Tensor, features: Tensor, geometries: Sequence[FrustumGeometry],
               bev: PillarGridConfig) -> Tensor:
    """
    深度分布と特徴の外積を BEV セルへ加算（最近傍スプラット）

    Args:
        depth_prob: (b, D, fh, fw)
        features: (b, C, fh, fw)
        geometries: サンプルごとの FrustumGeometry
        bev: BEV 設定

    Returns:
        (b, C, h, w)
    """
    b, d, fh, fw = depth_prob.shape
    channels = features.shape[1]
    if features.shape[0] != b or features.shape[2:] != (fh, fw):
        raise LiftError(f"深度 {depth_prob.shape} と特徴 {features.shape} の形状が一致しません")
    if len(geometries) != b:
        raise LiftError(f"ジオメトリ数 {len(geometries)} がバッチ数 {b} と一致しません")

    lifted = ops.mul(ops.reshape(depth_prob, (b, d, 1, fh, fw)),
                     ops.reshape(features, (b, 1, channels, fh, fw)))
    samples = ops.reshape(ops.transpose(lifted, (0, 1, 3, 4, 2)), (b * d * fh * fw, channels))

    cells_per_map = bev.height * bev.width
    rows: List[np.ndarray] = []
    targets: List[np.ndarray] = []
    per_sample = d * fh * fw
    for i, geometry in enumerate(geometries):
        if geometry.cell_index.shape != (per_sample,):
            raise LiftError(f"ジオメトリ {geometry.feature_size} が特徴サイズ ({fh}, {fw}) と一致しません")
        valid = np.nonzero(geometry.valid)[0]
        rows.append(valid + i * per_sample)
        targets.append(geometry.cell_index[valid] + i * cells_per_map)

    kept = ops.getitem(samples, np.concatenate(rows))
    grid = ops.index_add(kept, np.concatenate(targets), b * cells_per_map)
    grid = ops.reshape(grid, (b, bev.height, bev.width, channels))
    return ops.transpose(grid, (0, 3, 1, 2))


class KanvTransform(Module):
    """
    カメラ特徴 → BEV 変換

    downsample（ストライド2畳み込み）→ depthnet（D 深度ロジット、深度方向 softmax）
    → dtransform（KANConv + BN + ReLU を3段）→ lift/splat
    """

    def __init__(self, in_channels: int = 32, mid_channels: int = 32, out_channels: int = 64,
                 depth_bins: int = 32, use_kan: bool = True, grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        grid = grid or SplineGrid()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.depth_bins = depth_bins
        self.downsample = ConvBlock(Conv2d(in_channels, mid_channels, 3, stride=2, padding=1, rng=rng),
                                    mid_channels)
        self.depthnet = make_conv(mid_channels, depth_bins, use_kan, grid, rng, bias=True)
        channels = [mid_channels, out_channels, out_channels, out_channels]
        self.dtransform = [
            ConvBlock(make_conv(channels[i], channels[i + 1], use_kan, grid, rng), channels[i + 1])
            for i in range(3)
        ]
        self._geometry_cache: "OrderedDict[Tuple, FrustumGeometry]" = OrderedDict()

    def geometry(self, cam: CameraModel, feature_size: Tuple[int, int],
                 bev: PillarGridConfig) -> FrustumGeometry:
        key = (cam.intrinsic.tobytes(), cam.rotation.tobytes(), cam.translation.tobytes(),
               cam.image_size, cam.depth, feature_size, bev)
        cache = self._geometry_cache
        if key in cache:
            cache.move_to_end(key)
            return cache[key]
        geometry = frustum_geometry(cam, feature_size, bev)
        cache[key] = geometry
        if len(cache) > GEOMETRY_CACHE_SIZE:
            cache.popitem(last=False)
        return geometry

    def forward(self, feat: Tensor, cams: Sequence[CameraModel], bev: PillarGridConfig,
                return_depth: bool = False):
        return kanv_transform(feat, cams, bev, self, return_depth=return_depth)


def kanv_transform(feat: Tensor, cams, bev: PillarGridConfig, transform: KanvTransform,
                   return_depth: bool = False):
    """
    カメラ特徴マップを BEV 特徴へ変換

    Args:
        feat: (b, c_f, h_f, w_f)
        cams: CameraModel または その列
        bev: BEV 設定
        transform: KanvTransform

    Returns:
        (b, C, h, w)。return_depth=True なら (BEV, 深度分布)
    """
    feat = as_tensor(feat)
    if feat.ndim == 3:
        feat = ops.reshape(feat, (1,) + feat.shape)
    if isinstance(cams, CameraModel):
        cams = [cams] * feat.shape[0]
    if feat.shape[1] != transform.in_channels:
        raise LiftError(f"特徴チャネル {feat.shape[1]} が {transform.in_channels} と一致しません")

    x = transform.downsample(feat)
    depth_prob = ops.softmax(transform.depthnet(x), axis=1)
    for block in transform.dtransform:
        x = block(x)

    fh, fw = x.shape[2], x.shape[3]
    for cam in cams:
        h_img, w_img = cam.image_size
        if h_img % fh or w_img % fw:
            raise LiftError(f"特徴サイズ ({fh}, {fw}) が画像サイズ {cam.image_size} と整合しません")
    geometries = [transform.geometry(cam, (fh, fw), bev) for cam in cams]
    bev_map = lift_splat(depth_prob, x, geometries, bev)
    return (bev_map, depth_prob) if return_depth else bev_map
