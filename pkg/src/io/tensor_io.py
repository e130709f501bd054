"""
バイナリテンソル入出力モジュール

KFT1（任意ランクのテンソル）と KFPC（点群 N×4 float32）の読み書きを行います。

KFT1: b"KFT1" | u8 dtype (0=f32, 1=f64) | u8 rank | u64 dims (LE) × rank | 値 (LE, row-major)
KFPC: b"KFPC" | u64 N | N×4 float32 (LE)
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

KFT1_MAGIC = b'KFT1'
KFPC_MAGIC = b'KFPC'

DTYPE_CODES = {
    0: np.dtype('<f4'),
    1: np.dtype('<f8'),
}

PathLike = Union[str, Path]


class TensorFormatError(Exception):
    """テンソルファイル形式のエラー"""
    pass


def encode_kft1(array: np.ndarray) -> bytes:
    """配列を KFT1 バイト列に変換"""
    array = np.asarray(array)
    if array.dtype == np.float32:
        code = 0
    elif array.dtype == np.float64:
        code = 1
    else:
        raise TensorFormatError(f"KFT1 は float32 / float64 のみ対応しています: {array.dtype}")
    if array.ndim > 255:
        raise TensorFormatError(f"ランクが大きすぎます: {array.ndim}")

    header = KFT1_MAGIC + struct.pack('<BB', code, array.ndim)
    header += struct.pack(f'<{array.ndim}Q', *array.shape)
    body = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + body


def decode_kft1(payload: bytes, source: str = '<bytes>') -> np.ndarray:
    """KFT1 バイト列を配列に変換"""
    if len(payload) < 6 or payload[:4] != KFT1_MAGIC:
        raise TensorFormatError(f"KFT1 マジックが不正です: {source}")
    code, rank = struct.unpack_from('<BB', payload, 4)
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"未知の dtype コードです: {code} ({source})")

    offset = 6
    if len(payload) < offset + 8 * rank:
        raise TensorFormatError(f"ヘッダーが途中で切れています: {source}")
    shape = struct.unpack_from(f'<{rank}Q', payload, offset)
    offset += 8 * rank

    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) - offset != expected:
        raise TensorFormatError(
            f"データ長が一致しません: {len(payload) - offset} != {expected} バイト ({source})")

    values = np.frombuffer(payload, dtype=dtype, offset=offset)
    return values.reshape(shape).astype(dtype.newbyteorder('='))


def save_kft1(path: PathLike, array: np.ndarray) -> None:
    """KFT1 ファイルを書き込み"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_kft1(array))
    logger.debug(f"KFT1保存: {path} shape={np.shape(array)}")


def load_kft1(path: PathLike) -> np.ndarray:
    """KFT1 ファイルを読み込み"""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise TensorFormatError(f"ファイルを読み込めません: {path} ({e})")
    return decode_kft1(payload, source=str(path))


def save_kfpc(path: PathLike, points: np.ndarray) -> None:
    """点群（N×4）を KFPC ファイルに書き込み"""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 4:
        raise TensorFormatError(f"点群は N×4 である必要があります: {points.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = np.ascontiguousarray(points, dtype='<f4').tobytes()
    path.write_bytes(KFPC_MAGIC + struct.pack('<Q', points.shape[0]) + body)
    logger.debug(f"KFPC保存: {path} N={points.shape[0]}")


def load_kfpc(path: PathLike) -> np.ndarray:
    """KFPC ファイルを読み込み N×4 float32 配列を返す"""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise TensorFormatError(f"ファイルを読み込めません: {path} ({e})")

    if len(payload) < 12 or payload[:4] != KFPC_MAGIC:
        raise TensorFormatError(f"KFPC マジックが不正です: {path}")
    (count,) = struct.unpack_from('<Q', payload, 4)
    expected = count * 16
    if len(payload) - 12 != expected:
        raise TensorFormatError(f"点群データ長が一致しません: {len(payload) - 12} != {expected} バイト ({path})")
    values = np.frombuffer(payload, dtype='<f4', offset=12)
    return values.reshape(count, 4).astype(np.float32)
