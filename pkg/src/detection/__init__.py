"""
検出モジュール

3Dボックス、BEV IoU と NMS、検出ヘッド、学習損失、ボックス復元を提供。
"""

from src.detection.boxes import CLASS_NAMES, Box3D, DegenerateBoxError, bev_iou, nms, normalize_yaw
from src.detection.head import DetectionHead, HeadOutput, HeadShapeError, head_forward
from src.detection.loss import build_targets, detection_loss, gaussian_radius
from src.detection.decode import decode, decode_batch, encode_head_output

__all__ = [
    'CLASS_NAMES',
    'Box3D',
    'DegenerateBoxError',
    'bev_iou',
    'nms',
    'normalize_yaw',
    'DetectionHead',
    'HeadOutput',
    'HeadShapeError',
    'head_forward',
    'build_targets',
    'detection_loss',
    'gaussian_radius',
    'decode',
    'decode_batch',
    'encode_head_output',
]
