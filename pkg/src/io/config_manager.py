"""
設定管理モジュール

設定ファイルの読み込み、環境変数の処理、既定値との統合、設定値の検証を行います。
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import find_dotenv, load_dotenv

from src.io.run_config import ABLATION_PRESETS, RunConfig, build_run_config, default_config

logger = logging.getLogger(__name__)

PRECISIONS = ('f32', 'f64')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')

# 任意のキーを許す辞書（分割名など）
FREE_FORM_SECTIONS = ('data.splits',)


class ConfigError(Exception):
    """設定関連のエラー"""
    pass


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """override を base に再帰的に重ねた新しい辞書"""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigManager:
    """設定ファイル管理クラス"""

    def __init__(self):
        self._config: Optional[Dict[str, Any]] = None
        self._config_path: Optional[Path] = None
        self._project_root: Path = Path.cwd()

    def load_config(self, config_path: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        設定ファイルを読み込み、既定値と統合して検証

        Args:
            config_path: 設定ファイルのパス（省略時は既定値のみ）
            overrides: CLI などからの上書き（設定ファイルより優先）

        Returns:
            検証済みの設定辞書

        Raises:
            ConfigError: 設定ファイルの読み込みまたは検証に失敗した場合
        """
        try:
            self._config_path = Path(config_path) if config_path else None
            self._project_root = Path.cwd()

            # 環境変数読み込み
            self._load_env_variables()

            loaded: Dict[str, Any] = {}
            if self._config_path is not None:
                if not self._config_path.exists():
                    raise ConfigError(f"設定ファイルが見つかりません: {config_path}")
                with open(self._config_path, 'r', encoding='utf-8') as file:
                    loaded = yaml.safe_load(file)
                if loaded is None:
                    raise ConfigError("設定ファイルが空または無効です")
                if not isinstance(loaded, dict):
                    raise ConfigError("設定ファイルの最上位はマッピングである必要があります")

            # 環境変数置換
            loaded = self._replace_env_vars(loaded)

            config = deep_merge(default_config(), loaded)
            if overrides:
                config = deep_merge(config, overrides)
            self._config = config

            # 設定検証
            self._validate_config()

            # パスの正規化
            self._normalize_paths()
            self._ensure_output_directories()

            source = config_path or '既定値'
            logger.info(f"設定を読み込みました: {source}")
            return self._config

        except yaml.YAMLError as e:
            raise ConfigError(f"YAML解析エラー: {str(e)}")
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(f"設定読み込みエラー: {str(e)}")

    def _load_env_variables(self):
        """環境変数を読み込み"""
        # .envファイル検索（作業ディレクトリ優先）
        env_path = find_dotenv(usecwd=True)
        if not env_path and self._config_path:
            candidate = self._config_path.parent / '.env'
            if candidate.exists():
                env_path = str(candidate)

        if env_path:
            load_dotenv(env_path)
            logger.debug(f".envファイルを読み込みました: {env_path}")

    def _replace_env_vars(self, obj: Any) -> Any:
        """
        設定値内の環境変数を置換

        ${ENV_VAR} 形式の変数を環境変数の値に置換します。
        数値として解釈できる値は YAML のスカラーとして読み直します。
        """
        if isinstance(obj, dict):
            return {key: self._replace_env_vars(value) for key, value in obj.items()}
        elif isinstance(obj, list):
            return [self._replace_env_vars(item) for item in obj]
        elif isinstance(obj, str):
            return self._replace_single_env_var(obj)
        else:
            return obj

    def _replace_single_env_var(self, value: str) -> Any:
        """単一の文字列内の環境変数を置換"""
        if value.startswith('${') and value.endswith('}'):
            env_var_name = value[2:-1]
            env_value = os.getenv(env_var_name)
            if env_value is None:
                logger.warning(f"環境変数が設定されていません: {env_var_name}")
                return value
            return yaml.safe_load(env_value) if env_value.strip() else env_value
        return value

    def _check_schema(self, value: Any, default: Any, path: str, errors: List[str]) -> None:
        """既定値と同じ形（キー・型）であることを確認"""
        if isinstance(default, dict):
            if not isinstance(value, dict):
                errors.append(f"{path} はマッピングである必要があります")
                return
            if path in FREE_FORM_SECTIONS:
                return
            for key in value:
                if key not in default:
                    errors.append(f"未知の設定キーです: {path + '.' if path else ''}{key}")
            for key, sub_default in default.items():
                if key in value:
                    self._check_schema(value[key], sub_default, f"{path + '.' if path else ''}{key}", errors)
            return
        if default is None:
            return
        if isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{path} は真偽値である必要があります: {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{path} は整数である必要があります: {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{path} は数値である必要があります: {value!r}")
        elif isinstance(default, str):
            if not isinstance(value, str):
                errors.append(f"{path} は文字列である必要があります: {value!r}")
        elif isinstance(default, list):
            if not isinstance(value, list) or len(value) != len(default):
                errors.append(f"{path} は要素数 {len(default)} のリストである必要があります: {value!r}")

    def _validate_config(self):
        """設定値の検証"""
        if not self._config:
            raise ConfigError("設定が空です")

        errors: List[str] = []
        self._check_schema(self._config, default_config(), '', errors)
        if errors:
            raise ConfigError("設定スキーマエラー: " + "; ".join(errors))

        config = self._config
        model = config['model']

        # 正のサイズ
        for key in ('pillar_channels', 'lidar_channels', 'camera_channels', 'backbone_channels',
                    'vtransform_channels', 'fused_channels', 'head_hidden', 'num_classes',
                    'heads', 'attn_downsample'):
            if model[key] <= 0:
                raise ConfigError(f"model.{key} は正の整数である必要があります: {model[key]}")
        if model['lidar_channels'] % model['heads']:
            raise ConfigError(
                f"ヘッド数 {model['heads']} がチャネル数 {model['lidar_channels']} を割り切りません")
        if model['lidar_channels'] != model['camera_channels']:
            raise ConfigError("クロスアテンションには lidar_channels と camera_channels の一致が必要です")

        kan = model['kan']
        if kan['grid_size'] < 1 or kan['spline_order'] < 0 or kan['grid_max'] <= kan['grid_min']:
            raise ConfigError(f"KAN グリッド設定が不正です: {kan}")

        bev = model['bev']
        if bev['cell_size'] <= 0 or bev['x_max'] <= bev['x_min'] or bev['y_max'] <= bev['y_min']:
            raise ConfigError(f"BEV 範囲が不正です: {bev}")
        dims = []
        for span in (bev['x_max'] - bev['x_min'], bev['y_max'] - bev['y_min']):
            ratio = span / bev['cell_size']
            if abs(ratio - round(ratio)) > 1e-6:
                raise ConfigError(f"BEV 範囲 {span} がセルサイズ {bev['cell_size']} で割り切れません")
            dims.append(int(round(ratio)))
        if any(d % model['attn_downsample'] for d in dims):
            raise ConfigError(f"BEV サイズ {dims} がアテンション縮小率 {model['attn_downsample']} で割り切れません")
        if bev['max_pillars'] <= 0 or bev['max_points_per_pillar'] <= 0:
            raise ConfigError("ピラー数・ピラー内点数の上限は正である必要があります")

        depth = model['depth']
        if not (0 < depth['d_min'] < depth['d_max']) or depth['bins'] <= 0:
            raise ConfigError(f"深度ビン設定が不正です: {depth}")

        opt = config['optimizer']
        if opt['lr'] <= 0 or opt['weight_decay'] < 0 or opt['batch_size'] <= 0:
            raise ConfigError("学習率・重み減衰・バッチサイズの値が不正です")
        if not (0 < opt['warmup_ratio'] <= 1) or not (0 <= opt['warmup_fraction'] < 1):
            raise ConfigError("ウォームアップ設定は (0, 1] / [0, 1) の範囲が必要です")
        if any(e < 0 for e in opt['stage_epochs']) or opt['toy_factor'] <= 0:
            raise ConfigError("ステージのエポック数とトイ係数は非負・正である必要があります")

        data = config['data']
        for name, size in data['splits'].items():
            if not isinstance(size, int) or isinstance(size, bool) or size < 0:
                raise ConfigError(f"分割 {name} のサイズは0以上の整数である必要があります: {size!r}")
        probs = data['scene_set']['class_probs']
        if len(probs) != model['num_classes'] or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"クラス確率は {model['num_classes']} 個の非負値で合計1が必要です: {probs}")
        camera = data['camera']
        if camera['channels'] <= 0 or camera['image_height'] % 8 or camera['image_width'] % 8:
            raise ConfigError("カメラ画像サイズは8の倍数、チャネル数は正である必要があります")

        preset = config['ablation']['preset']
        if preset is not None and preset not in ABLATION_PRESETS:
            raise ConfigError(f"未知のアブレーションプリセットです: {preset}（選択肢: {sorted(ABLATION_PRESETS)}）")

        evaluation = config['evaluation']
        for key in ('iou_threshold', 'score_thresh', 'decode_score_thresh', 'nms_iou', 'occlusion_threshold'):
            if not (0.0 <= evaluation[key] <= 1.0):
                raise ConfigError(f"evaluation.{key} は [0, 1] の範囲が必要です: {evaluation[key]}")

        execution = config['execution']
        if execution['precision'] not in PRECISIONS:
            raise ConfigError(f"精度は {PRECISIONS} のいずれかである必要があります: {execution['precision']}")
        if execution['max_workers'] <= 0:
            raise ConfigError("ワーカー数は正の整数である必要があります")

        if config['logging']['level'].upper() not in LOG_LEVELS:
            raise ConfigError(f"ログレベルが不正です: {config['logging']['level']}")

        logger.info("設定検証が完了しました")

    def _ensure_output_directories(self):
        """出力ディレクトリの作成"""
        output_config = self._config['output']

        out_dir = Path(output_config.get('dir', './output'))
        out_dir.mkdir(parents=True, exist_ok=True)

        # ログファイルのディレクトリ
        log_file = Path(output_config.get('log_file', './logs/kanfuse.log'))
        log_file.parent.mkdir(parents=True, exist_ok=True)

    def _normalize_paths(self):
        """設定内のパスをプロジェクトルート基準で正規化"""
        if not self._config:
            return

        output_config = self._config.get('output', {})
        for key in ['dir', 'log_file']:
            if key in output_config:
                output_config[key] = str(self._resolve_output_path(output_config[key]))

        data_config = self._config.get('data', {})
        if 'dataset_dir' in data_config:
            data_config['dataset_dir'] = str(self._resolve_output_path(data_config['dataset_dir']))

    def _resolve_output_path(self, path_value: Any) -> Path:
        """出力系パスを解決（存在しなくても良い）"""
        candidate = Path(str(path_value))
        if candidate.is_absolute():
            return candidate

        # プロジェクトルート基準で絶対パス化
        return (self._project_root / candidate).resolve(strict=False)

    def get_config(self) -> Dict[str, Any]:
        """現在の設定を取得"""
        if not self._config:
            raise ConfigError("設定が読み込まれていません")
        return self._config.copy()

    def build_run_config(self, config: Optional[Dict[str, Any]] = None) -> RunConfig:
        """設定辞書（省略時は現在の設定）から RunConfig を作成"""
        try:
            return build_run_config(config if config is not None else self.get_config())
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(f"実行設定の構築エラー: {str(e)}")

