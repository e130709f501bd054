"""
LiDAR レイキャストモジュール

路側 LiDAR の走査パターンでレイを飛ばし、ボックス（スラブ法）と地面との最初の交点に
距離方向のガウスノイズを加えて点群を作ります。地面はレイを止めますが、
ground_returns が無効なら点を返しません。
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from src.detection.boxes import Box3D
from src.encoders.pillars import PointCloud
from src.synth.scene import STREAM_LIDAR, LidarPose, Scene, stream_rng

logger = logging.getLogger(__name__)

INTENSITY_TARGET = 0.6
INTENSITY_OCCLUDER = 0.4
INTENSITY_GROUND = 0.15
INTENSITY_JITTER = 0.05


@dataclass
class RaycastResult:
    """レイキャスト結果"""
    cloud: PointCloud
    point_counts: List[int]
    occlusion: List[float]


def ray_directions(pose: LidarPose) -> np.ndarray:
    """走査パターンの単位方向ベクトル (R, 3)（仰角ごとに方位角を走査）"""
    azimuth = np.radians(np.linspace(pose.azimuth_min_deg, pose.azimuth_max_deg, pose.azimuth_steps))
    elevation = np.radians(np.linspace(pose.elevation_min_deg, pose.elevation_max_deg, pose.elevation_steps))
    el, az = np.meshgrid(elevation, azimuth, indexing='ij')
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


def ray_box_entry(origin: np.ndarray, directions: np.ndarray, box: Box3D) -> np.ndarray:
    """
    スラブ法によるレイとボックスの進入距離

    Returns:
        (R,) 進入距離。交差しないレイは inf
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = origin - np.array([box.x, box.y, box.z])
    local_origin = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
    local_dirs = np.stack([c * directions[:, 0] + s * directions[:, 1],
                           -s * directions[:, 0] + c * directions[:, 1],
                           directions[:, 2]], axis=1)
    half = np.array([box.l, box.w, box.h]) / 2.0

    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (-half - local_origin) / local_dirs
        t2 = (half - local_origin) / local_dirs
    parallel = local_dirs == 0.0
    inside_slab = np.abs(local_origin) <= half
    t_low = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    t_high = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = t_low.max(axis=1)
    t_exit = t_high.min(axis=1)
    hit = (t_exit >= t_enter) & (t_enter > 0.0)
    return np.where(hit, t_enter, np.inf)


def raycast(pose: LidarPose, targets: Sequence[Box3D], occluders: Sequence[Box3D],
            seed: int) -> RaycastResult:
    """
    レイキャスト本体

    ノイズは全レイ分を固定長で引くため、遮蔽物の追加で他のレイの点は変わりません。
    遮蔽率は「そのボックスを通るレイのうち最初に当たったレイの割合」を1から引いた値です。
    """
    origin = np.asarray(pose.position, dtype=np.float64)
    directions = ray_directions(pose)
    num_rays = directions.shape[0]
    rng = stream_rng(seed, STREAM_LIDAR)
    noise = rng.normal(0.0, pose.noise_sigma, size=num_rays)
    jitter = rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER, size=num_rays)

    boxes = list(targets) + list(occluders)
    entry = np.full((len(boxes) + 1, num_rays), np.inf)
    for i, box in enumerate(boxes):
        entry[i] = ray_box_entry(origin, directions, box)
    with np.errstate(divide='ignore', invalid='ignore'):
        ground = np.where(directions[:, 2] < 0.0, -origin[2] / directions[:, 2], np.inf)
    entry[-1] = ground
    entry[entry > pose.max_range] = np.inf

    first = np.argmin(entry, axis=0)
    t_first = entry[first, np.arange(num_rays)]
    returned = np.isfinite(t_first)
    if not pose.ground_returns:
        returned &= first < len(boxes)

    intensity = np.full(num_rays, INTENSITY_GROUND)
    intensity[first < len(targets)] = INTENSITY_TARGET
    intensity[(first >= len(targets)) & (first < len(boxes))] = INTENSITY_OCCLUDER

    ranges = t_first[returned] + noise[returned]
    xyz = origin + directions[returned] * ranges[:, None]
    points = np.concatenate([xyz, np.clip(intensity[returned] + jitter[returned], 0.0, 1.0)[:, None]], axis=1)
    cloud = PointCloud(points.astype(np.float32))

    emitted = cloud.points[:, :3].astype(np.float64)
    counts = [int(box.contains(emitted).sum()) for box in targets]
    occlusion: List[float] = []
    for i in range(len(targets)):
        crossing = int(np.isfinite(entry[i]).sum())
        first_hits = int((returned & (first == i)).sum())
        occlusion.append(1.0 - first_hits / crossing if crossing else 1.0)
    return RaycastResult(cloud, counts, occlusion)


def raycast_lidar(scene: Scene) -> PointCloud:
    """
    シーンをレイキャストして点群を返す

    scene.point_counts（出力点群に対する箱内判定の点数）と scene.occlusion を設定します。
    """
    result = raycast(scene.lidar, scene.boxes, scene.occluders, scene.seed)
    scene.point_counts = result.point_counts
    scene.occlusion = result.occlusion
    logger.debug(f"レイキャスト: seed={scene.seed} 点数={len(result.cloud)} 箱内点数={result.point_counts}")
    return result.cloud


def box_surface_distance(points: np.ndarray, box: Box3D) -> np.ndarray:
    """点からボックス表面までの距離（検証用）"""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = np.asarray(points, dtype=np.float64)[:, :3] - np.array([box.x, box.y, box.z])
    local = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]], axis=1)
    half = np.array([box.l, box.w, box.h]) / 2.0
    q = np.abs(local) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)