"""
PointEncoder モジュール

2段の Pillar Feature Net（PFN）でピラーを符号化し、BEV マップへ散布します。
KAN 版では各 PFN の線形層を KanLayer に置き換え、直後にバッチ正規化を置きます。
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from src.encoders.pillars import DECORATION_DIM, PillarGrid, PillarGridConfig, pillar_scatter
from src.kan.kan_layer import KanLayer
from src.kan.spline import SplineGrid
from src.tensor import ops
from src.tensor.layers import BatchNorm, Linear, Module
from src.tensor.tensor import Tensor, get_dtype

logger = logging.getLogger(__name__)


class PointEncoderError(Exception):
    """PointEncoder のエラー"""
    pass


class PillarFeatureNet(Module):
    """
    PFN 1段分

    KAN 版: 前正規化 → KanLayer → バッチ正規化
    通常版: Linear（バイアスなし） → バッチ正規化 → ReLU
    """

    def __init__(self, n_in: int, n_out: int, use_kan: bool, grid: SplineGrid,
                 rng: np.random.Generator):
        super().__init__()
        self.use_kan = use_kan
        self.n_in = n_in
        self.n_out = n_out
        if use_kan:
            self.pre_norm = BatchNorm(n_in)
            self.layer = KanLayer(n_in, n_out, grid=grid, rng=rng)
        else:
            self.pre_norm = None
            self.layer = Linear(n_in, n_out, bias=False, rng=rng)
        self.norm = BatchNorm(n_out)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise PointEncoderError(f"PFN 入力次元 {x.shape[-1]} が {self.n_in} と一致しません")
        if self.pre_norm is not None:
            x = self.pre_norm(x)
        out = self.norm(self.layer(x))
        return out if self.use_kan else ops.relu(out)


class PointEncoder(Module):
    """
    2段 PFN のピラーエンコーダ

    1段目は点ごとに 9→c₁ を適用して有効点で max プーリングし、
    2段目はプーリング済みのピラーベクトルに c₁→c を適用します。
    """

    def __init__(self, pillar_channels: int = 32, out_channels: int = 64, use_kan: bool = True,
                 grid: Optional[SplineGrid] = None, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        grid = grid or SplineGrid()
        self.out_channels = out_channels
        self.pfn1 = PillarFeatureNet(DECORATION_DIM, pillar_channels, use_kan, grid, rng)
        self.pfn2 = PillarFeatureNet(pillar_channels, out_channels, use_kan, grid, rng)

    def encode_pillars(self, grids: Sequence[PillarGrid]) -> Tensor:
        """複数サンプルのピラーをまとめて符号化 → (ΣP, c)"""
        point_rows: List[np.ndarray] = []
        segments: List[np.ndarray] = []
        offset = 0
        for grid in grids:
            if grid.pillars.shape[-1] != DECORATION_DIM:
                raise PointEncoderError(f"装飾次元が {DECORATION_DIM} ではありません: {grid.pillars.shape}")
            slots = np.arange(grid.pillars.shape[1])
            valid = slots[None, :] < grid.counts[:, None]
            rows, cols = np.nonzero(valid)
            point_rows.append(grid.pillars[rows, cols])
            segments.append(rows + offset)
            offset += grid.num_pillars

        points = Tensor(np.concatenate(point_rows, axis=0))
        segment_ids = np.concatenate(segments)

        per_point = self.pfn1(points)
        pooled = ops.segment_max(per_point, segment_ids, offset)
        # 2段目の入力は1ピラー1スロットなので max は恒等写像
        return self.pfn2(pooled)

    def forward(self, grids: Sequence[PillarGrid]) -> Tensor:
        return point_encoder_forward(grids, self)


def point_encoder_forward(grids, encoder: PointEncoder) -> Tensor:
    """
    ピラー群を LiDAR BEV 特徴へ符号化

    Args:
        grids: PillarGrid または その列（バッチ）
        encoder: PointEncoder

    Returns:
        (b, c, h, w)。ピラーが無い場合は全て 0
    """
    if isinstance(grids, PillarGrid):
        grids = [grids]
    if not grids:
        raise PointEncoderError("入力ピラーが空です")
    cfg: PillarGridConfig = grids[0].config
    batch_size = len(grids)
    total = sum(g.num_pillars for g in grids)
    if total == 0:
        return Tensor(np.zeros((batch_size, encoder.out_channels, cfg.height, cfg.width), dtype=get_dtype()))

    non_empty = [g for g in grids if g.num_pillars]
    features = encoder.encode_pillars(non_empty)
    coords = np.concatenate([g.coords for g in non_empty], axis=0)
    batch_index = np.concatenate([np.full(g.num_pillars, b, dtype=np.int64)
                                  for b, g in enumerate(grids) if g.num_pillars])
    return pillar_scatter(features, coords, cfg.height, cfg.width,
                          batch_index=batch_index, batch_size=batch_size)
