"""
ConvKAN フューザーモジュール

[LiDAR ‖ カメラ] をチャネル方向に連結し、KANConv（3×3, 同サイズ）→ BN → ReLU で融合します。
KAN を無効にした場合は通常の 3×3 畳み込みを使用します。
"""

import logging
from typing import Optional

import numpy as np

from src.fusion.bev import BevShapeError
from src.kan.kan_conv import KanConv2d
from src.kan.spline import SplineGrid
from src.tensor import ops
from src.tensor.layers import BatchNorm, Conv2d, Module
from src.tensor.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)


class ConvKanFuser(Module):
    """BEV 特徴フューザー"""

    def __init__(self, lidar_channels: int = 64, camera_channels: int = 64, out_channels: int = 64,
                 use_kan: bool = True, grid: Optional[SplineGrid] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        c_in = lidar_channels + camera_channels
        self.lidar_channels = lidar_channels
        self.camera_channels = camera_channels
        self.out_channels = out_channels
        self.use_kan = use_kan
        if use_kan:
            self.pre_norm = BatchNorm(c_in)
            self.kernel = KanConv2d(c_in, out_channels, kernel_size=3, padding=1,
                                    grid=grid or SplineGrid(), rng=rng)
        else:
            self.pre_norm = None
            self.kernel = Conv2d(c_in, out_channels, 3, padding=1, rng=rng)
        self.norm = BatchNorm(out_channels)

    def forward(self, lidar: Tensor, camera: Tensor) -> Tensor:
        return conv_kan_fuse(lidar, camera, self)


def conv_kan_fuse(lidar: Tensor, attended_cam: Tensor, fuser: ConvKanFuser) -> Tensor:
    """
    LiDAR 特徴とアテンション済みカメラ特徴を融合

    Returns:
        (b, out_channels, h, w)（空間サイズは入力と同じ）

    Raises:
        BevShapeError: 空間サイズまたはチャネル数の不一致
    """
    lidar, attended_cam = as_tensor(lidar), as_tensor(attended_cam)
    if lidar.ndim != 4 or attended_cam.ndim != 4:
        raise BevShapeError(f"入力は (b, c, h, w) が必要です: {lidar.shape}, {attended_cam.shape}")
    if lidar.shape[0] != attended_cam.shape[0] or lidar.shape[2:] != attended_cam.shape[2:]:
        raise BevShapeError(f"LiDAR {lidar.shape} とカメラ {attended_cam.shape} の空間サイズが一致しません")
    if (lidar.shape[1], attended_cam.shape[1]) != (fuser.lidar_channels, fuser.camera_channels):
        raise BevShapeError(
            f"チャネル数 ({lidar.shape[1]}, {attended_cam.shape[1]}) が "
            f"({fuser.lidar_channels}, {fuser.camera_channels}) と一致しません")

    x = ops.concat([lidar, attended_cam], axis=1)
    if fuser.pre_norm is not None:
        x = fuser.pre_norm(x)
    return ops.relu(fuser.norm(fuser.kernel(x)))
