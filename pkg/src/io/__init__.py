"""
入出力モジュール

設定管理、テンソル/データセット/チェックポイントの入出力、出力管理を提供。
"""

from src.io.config_manager import ConfigManager, ConfigError
from src.io.output_manager import OutputError, OutputManager, load_detections
from src.io.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from src.io.dataset_io import Dataset, DatasetError, read_dataset, write_dataset

__all__ = [
    'ConfigManager',
    'ConfigError',
    'OutputManager',
    'OutputError',
    'load_detections',
    'Checkpoint',
    'CheckpointError',
    'load_checkpoint',
    'save_checkpoint',
    'Dataset',
    'DatasetError',
    'read_dataset',
    'write_dataset',
]
