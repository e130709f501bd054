"""
ピラー化モジュール

点群を BEV セルごとの柱（ピラー）に分け、PointPillars 形式の9次元特徴で装飾します。
また、ピラー特徴を BEV マップへ散布する処理と、その逆の収集処理を提供します。
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from src.tensor import ops
from src.tensor.tensor import Tensor, as_tensor, get_dtype

logger = logging.getLogger(__name__)

DECORATION_DIM = 9


class PillarError(Exception):
    """ピラー処理のエラー"""
    pass


@dataclass(frozen=True)
class PillarGridConfig:
    """BEV グリッド設定（範囲はメートル、x が幅方向、y が高さ方向）"""
    x_min: float = 0.0
    x_max: float = 76.8
    y_min: float = -38.4
    y_max: float = 38.4
    cell_size: float = 0.8
    max_pillars: int = 4096
    max_points_per_pillar: int = 32

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise PillarError(f"BEV 範囲が空です: x=[{self.x_min}, {self.x_max}) y=[{self.y_min}, {self.y_max})")
        if self.cell_size <= 0:
            raise PillarError(f"セルサイズは正である必要があります: {self.cell_size}")
        for span in (self.x_max - self.x_min, self.y_max - self.y_min):
            ratio = span / self.cell_size
            if abs(ratio - round(ratio)) > 1e-6:
                raise PillarError(f"BEV 範囲 {span} がセルサイズ {self.cell_size} で割り切れません")

    @property
    def width(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_size))

    @property
    def height(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_size))

    def cell_of(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """座標からセル番号 (ix, iy) を求める（範囲外も含めてそのまま返す）"""
        ix = np.floor((np.asarray(x, dtype=np.float64) - self.x_min) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(y, dtype=np.float64) - self.y_min) / self.cell_size).astype(np.int64)
        return ix, iy

    def in_extent(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ix, iy = self.cell_of(x, y)
        return (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)

    def to_dict(self) -> dict:
        return {
            'x_min': self.x_min, 'x_max': self.x_max,
            'y_min': self.y_min, 'y_max': self.y_max,
            'cell_size': self.cell_size,
            'max_pillars': self.max_pillars,
            'max_points_per_pillar': self.max_points_per_pillar,
        }


@dataclass
class PointCloud:
    """点群（N×4: x, y, z [m], 反射強度 [0, 1]）"""
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float32))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            raise PillarError("点群に有限でない座標が含まれています")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class PillarGrid:
    """ピラー化結果"""
    config: PillarGridConfig
    pillars: np.ndarray   # (P, N_p, 9)
    coords: np.ndarray    # (P, 2) = (ix, iy)
    counts: np.ndarray    # (P,)

    @property
    def num_pillars(self) -> int:
        return int(self.coords.shape[0])


def pillarize(cloud: PointCloud, cfg: PillarGridConfig, seed: int = 0) -> PillarGrid:
    """
    点群をピラー化

    ピラー内の点は座標の辞書順に並べ替えてから扱うため、点の入力順に依存しません。
    ピラー数が上限を超える場合は点数の多い順（同数はセル番号順）に残し、
    1ピラーの点数が上限を超える場合は seed で再現可能にサブサンプルします。

    Args:
        cloud: 点群
        cfg: グリッド設定
        seed: サブサンプル用シード

    Returns:
        PillarGrid
    """
    points = cloud.points.astype(np.float64)
    n_p = cfg.max_points_per_pillar
    dtype = get_dtype()

    inside = cfg.in_extent(points[:, 0], points[:, 1]) if len(points) else np.zeros(0, dtype=bool)
    points = points[inside]
    if points.shape[0] == 0:
        return PillarGrid(cfg, np.zeros((0, n_p, DECORATION_DIM), dtype=dtype),
                          np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))

    ix, iy = cfg.cell_of(points[:, 0], points[:, 1])
    cell_id = iy * cfg.width + ix

    # セル番号 → 座標の辞書順で整列
    order = np.lexsort((points[:, 3], points[:, 2], points[:, 1], points[:, 0], cell_id))
    points, cell_id, ix, iy = points[order], cell_id[order], ix[order], iy[order]

    unique_ids, starts, totals = np.unique(cell_id, return_index=True, return_counts=True)
    rank = np.lexsort((unique_ids, -totals))[:cfg.max_pillars]

    rng = np.random.default_rng(seed)
    num_pillars = rank.size
    pillars = np.zeros((num_pillars, n_p, DECORATION_DIM), dtype=np.float64)
    coords = np.zeros((num_pillars, 2), dtype=np.int64)
    counts = np.zeros(num_pillars, dtype=np.int64)

    for slot, u in enumerate(rank):
        members = np.arange(starts[u], starts[u] + totals[u])
        if members.size > n_p:
            members = np.sort(rng.choice(members, size=n_p, replace=False))
        pts = points[members]
        cx = cfg.x_min + (ix[members[0]] + 0.5) * cfg.cell_size
        cy = cfg.y_min + (iy[members[0]] + 0.5) * cfg.cell_size
        mean = pts[:, :3].mean(axis=0)

        n = pts.shape[0]
        pillars[slot, :n, :4] = pts
        pillars[slot, :n, 4:7] = pts[:, :3] - mean
        pillars[slot, :n, 7] = pts[:, 0] - cx
        pillars[slot, :n, 8] = pts[:, 1] - cy
        coords[slot] = (ix[members[0]], iy[members[0]])
        counts[slot] = n

    logger.debug(f"ピラー化: 点数={points.shape[0]} ピラー数={num_pillars}")
    return PillarGrid(cfg, pillars.astype(dtype), coords, counts)


def flat_cell_index(coords: np.ndarray, width: int, height: int,
                    batch_index: Optional[np.ndarray] = None) -> np.ndarray:
    """(ix, iy) とバッチ番号から平坦化インデックス (b·h + y)·w + x を求める"""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if coords.size and (coords[:, 0].min() < 0 or coords[:, 0].max() >= width
                        or coords[:, 1].min() < 0 or coords[:, 1].max() >= height):
        raise PillarError(f"座標がグリッド {height}x{width} の外にあります")
    batch = np.zeros(coords.shape[0], dtype=np.int64) if batch_index is None else np.asarray(batch_index)
    return (batch * height + coords[:, 1]) * width + coords[:, 0]


def pillar_scatter(features: Tensor, coords: np.ndarray, height: int, width: int,
                   batch_index: Optional[np.ndarray] = None, batch_size: int = 1) -> Tensor:
    """
    ピラー特徴を BEV マップへ散布

    Args:
        features: (P, c)
        coords: (P, 2) = (ix, iy)
        height, width: BEV サイズ
        batch_index: 各ピラーのバッチ番号（省略時は全て 0）
        batch_size: バッチ数

    Returns:
        (batch_size, c, height, width)。未使用セルは 0

    Raises:
        PillarError: 座標の重複または範囲外
    """
    features = as_tensor(features)
    flat = flat_cell_index(coords, width, height, batch_index)
    if np.unique(flat).size != flat.size:
        raise PillarError("散布先の座標が重複しています")
    channels = features.shape[1]
    grid = ops.index_add(features, flat, batch_size * height * width)
    grid = ops.reshape(grid, (batch_size, height, width, channels))
    return ops.transpose(grid, (0, 3, 1, 2))


def pillar_gather(bev: Tensor, coords: np.ndarray,
                  batch_index: Optional[np.ndarray] = None) -> Tensor:
    """BEV マップ (b, c, h, w) からピラー位置の特徴 (P, c) を収集"""
    bev = as_tensor(bev)
    b, c, h, w = bev.shape
    flat = flat_cell_index(coords, w, h, batch_index)
    rows = ops.reshape(ops.transpose(bev, (0, 2, 3, 1)), (b * h * w, c))
    return ops.getitem(rows, flat)
