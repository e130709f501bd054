"""
出力管理モジュール

評価レポート、学習ログ、検出結果、可視化サイドカーなどのファイル出力を一元管理します。
YAML（構造化テキスト）、CSV（pandas）、検出レコード（1行1レコードの YAML フロー形式）、
8ビットグレースケール画像（Pillow）、KFT1 テンソルに対応。
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from PIL import Image

from src.detection.boxes import CLASS_NAMES, Box3D
from src.io.tensor_io import TensorFormatError, save_kft1

logger = logging.getLogger(__name__)

DETECTION_FIELDS = ('scene', 'class', 'score', 'x', 'y', 'z', 'w', 'l', 'h', 'yaw')


class OutputError(Exception):
    """出力関連のエラー"""
    pass


class OutputManager:
    """出力ファイル管理"""

    # デフォルト設定
    DEFAULT_CSV_ENCODING = "utf-8"
    DEFAULT_FLOAT_FORMAT = "%.6f"

    # ファイルサイズ警告（MB）
    MAX_FILE_SIZE_MB = 100

    def __init__(self, out_dir: Union[str, Path], float_format: str = DEFAULT_FLOAT_FORMAT):
        """
        OutputManager初期化

        Args:
            out_dir: 出力ディレクトリ
            float_format: CSV の浮動小数フォーマット
        """
        self.out_dir = Path(out_dir)
        self.float_format = float_format

        self._ensure_directories()

        # 統計情報
        self.stats = self._empty_stats()

        logger.info(f"OutputManagerを初期化しました: {self.out_dir}")

    @staticmethod
    def _empty_stats() -> Dict[str, int]:
        return {
            'yaml_files_created': 0,
            'csv_files_created': 0,
            'csv_rows_written': 0,
            'detections_written': 0,
            'images_created': 0,
            'tensors_created': 0,
            'total_data_size_bytes': 0,
        }

    def _ensure_directories(self):
        """出力ディレクトリを作成"""
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(f"ディレクトリ作成エラー: {str(e)}")

    def path_for(self, name: str) -> Path:
        """出力ディレクトリ内のファイルパス（サブディレクトリは作成する）"""
        parts = [self._sanitize_filename(part) for part in Path(name).parts]
        if not parts:
            raise OutputError("ファイル名が空です")
        path = self.out_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _record_size(self, path: Path):
        size = path.stat().st_size
        self.stats['total_data_size_bytes'] += size
        size_mb = size / (1024 * 1024)
        if size_mb > self.MAX_FILE_SIZE_MB:
            logger.warning(f"大きな出力ファイル ({size_mb:.1f}MB): {path.name}")

    def save_yaml(self, data: Mapping[str, Any], name: str) -> Path:
        """
        構造化テキスト（YAML）で保存

        Args:
            data: 保存するデータ
            name: ファイル名（out_dir からの相対）

        Returns:
            保存されたファイルパス

        Raises:
            OutputError: ファイル保存に失敗した場合
        """
        path = self.path_for(name)
        try:
            with open(path, 'w', encoding='utf-8') as f:
                yaml.safe_dump(_plain(data), f, allow_unicode=True, sort_keys=False)
        except (OSError, yaml.YAMLError) as e:
            logger.error(f"YAML保存エラー {path.name}: {str(e)}")
            raise OutputError(f"YAML保存エラー: {str(e)}")

        self.stats['yaml_files_created'] += 1
        self._record_size(path)
        logger.debug(f"YAML保存完了: {path}")
        return path

    def save_csv(self, rows: Sequence[Mapping[str, Any]], name: str,
                 columns: Optional[Sequence[str]] = None) -> Path:
        """
        CSV形式で保存

        Args:
            rows: 行データ（辞書のリスト）
            name: ファイル名
            columns: 列順（省略時は出現順）

        Returns:
            保存されたファイルパス
        """
        path = self.path_for(name)
        try:
            df = pd.DataFrame(list(rows), columns=list(columns) if columns else None)
            df.to_csv(path, index=False, encoding=self.DEFAULT_CSV_ENCODING,
                      float_format=self.float_format)
        except (OSError, ValueError) as e:
            logger.error(f"CSV保存エラー {path.name}: {str(e)}")
            raise OutputError(f"CSV保存エラー: {str(e)}")

        self.stats['csv_files_created'] += 1
        self.stats['csv_rows_written'] += len(df)
        self._record_size(path)
        logger.debug(f"CSV保存完了: {path}（{len(df)}行）")
        return path

    def save_detections(self, boxes_by_scene: Mapping[str, Sequence[Box3D]], name: str) -> Path:
        """
        検出結果を1行1レコードで保存

        各行は {scene, class, score, x, y, z, w, l, h, yaw} の YAML フローマッピング。
        """
        path = self.path_for(name)
        count = 0
        try:
            with open(path, 'w', encoding='utf-8') as f:
                for scene_id, boxes in boxes_by_scene.items():
                    for box in boxes:
                        f.write(format_detection(scene_id, box) + '\n')
                        count += 1
        except OSError as e:
            logger.error(f"検出結果保存エラー {path.name}: {str(e)}")
            raise OutputError(f"検出結果保存エラー: {str(e)}")

        self.stats['detections_written'] += count
        self._record_size(path)
        logger.info(f"検出結果を保存しました: {path}（{count}件）")
        return path

    def save_image(self, image: np.ndarray, name: str) -> Path:
        """
        8ビットグレースケール画像（PNG）で保存

        Raises:
            OutputError: 2次元 uint8 以外、または保存失敗
        """
        image = np.asarray(image)
        if image.ndim != 2 or image.dtype != np.uint8:
            raise OutputError(f"画像は2次元の uint8 配列である必要があります: {image.shape} {image.dtype}")
        path = self.path_for(name)
        try:
            Image.fromarray(image, mode='L').save(path)
        except (OSError, ValueError) as e:
            logger.error(f"画像保存エラー {path.name}: {str(e)}")
            raise OutputError(f"画像保存エラー: {str(e)}")

        self.stats['images_created'] += 1
        self._record_size(path)
        logger.debug(f"画像保存完了: {path}")
        return path

    def save_tensor(self, array: np.ndarray, name: str) -> Path:
        """KFT1 形式でテンソルを保存"""
        path = self.path_for(name)
        try:
            save_kft1(path, np.asarray(array))
        except (OSError, TensorFormatError) as e:
            logger.error(f"テンソル保存エラー {path.name}: {str(e)}")
            raise OutputError(f"テンソル保存エラー: {str(e)}")

        self.stats['tensors_created'] += 1
        self._record_size(path)
        logger.debug(f"テンソル保存完了: {path}")
        return path

    def _sanitize_filename(self, filename: str) -> str:
        """ファイル名を安全な文字に変換"""
        unsafe_chars = '<>:"/\\|?*'
        safe_filename = filename
        for char in unsafe_chars:
            safe_filename = safe_filename.replace(char, '_')
        if safe_filename in ('.', '..'):
            safe_filename = '_'
        return safe_filename[:100].replace(' ', '_')

    def get_stats(self) -> Dict[str, Any]:
        """統計情報を取得"""
        return self.stats.copy()

    def reset_stats(self):
        """統計情報をリセット"""
        self.stats = self._empty_stats()
        logger.debug("出力統計情報をリセットしました")


def _plain(value: Any) -> Any:
    """numpy スカラー等を YAML 安全な Python 値に変換"""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, 'item') and callable(value.item):
        return value.item()
    return value


def format_detection(scene_id: str, box: Box3D) -> str:
    if not 0 <= box.label < len(CLASS_NAMES):
        raise OutputError(f"未知のクラスIDです: {box.label}")
    record = {
        'scene': scene_id,
        'class': CLASS_NAMES[box.label],
        'score': float(box.score),
        'x': float(box.x), 'y': float(box.y), 'z': float(box.z),
        'w': float(box.w), 'l': float(box.l), 'h': float(box.h),
        'yaw': float(box.yaw),
    }
    return yaml.safe_dump(record, default_flow_style=True, sort_keys=False,
                          width=float('inf')).strip()


def parse_detection(line: str) -> Tuple[str, Box3D]:
    """1レコードを (scene_id, Box3D) に変換"""
    record = yaml.safe_load(line)
    if not isinstance(record, dict) or set(record) != set(DETECTION_FIELDS):
        raise OutputError(f"検出レコードが不正です: {line.strip()}")
    if record['class'] not in CLASS_NAMES:
        raise OutputError(f"未知のクラスです: {record['class']}")
    box = Box3D(float(record['x']), float(record['y']), float(record['z']),
                float(record['w']), float(record['l']), float(record['h']),
                float(record['yaw']), CLASS_NAMES.index(record['class']), float(record['score']))
    return str(record['scene']), box


def load_detections(path: Union[str, Path]) -> Dict[str, List[Box3D]]:
    """
    検出結果ファイルを読み込み

    Returns:
        シーンID → 検出ボックスのリスト（ファイル内の順序）
    """
    path = Path(path)
    if not path.exists():
        raise OutputError(f"検出結果ファイルが見つかりません: {path}")
    result: Dict[str, List[Box3D]] = {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if not line.strip():
                    continue
                scene_id, box = parse_detection(line)
                result.setdefault(scene_id, []).append(box)
    except yaml.YAMLError as e:
        raise OutputError(f"検出結果ファイルの解析に失敗しました: {e}")
    logger.debug(f"検出結果を読み込みました: {path}（{sum(len(v) for v in result.values())}件）")
    return result
