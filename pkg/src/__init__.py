"""
KANFuse

KAN（Kolmogorov-Arnold）層によるカメラ・LiDAR 融合 3D 検出器の卓上実装。
合成路側シーンでの学習・評価と、勾配検証・可視化・ベンチマークを提供します。
"""

__version__ = "0.4.0"
__author__ = "Perception Lab Team"
__description__ = "Desk-scale KAN camera-LiDAR fusion 3D detector"

# 入出力
from src.io.config_manager import ConfigManager, ConfigError
from src.io.output_manager import OutputManager, OutputError

# モデル
from src.model.network import KanInfraDetModel

# 評価
from src.evaluation.evaluator import EvalReport, EvaluationError, evaluate

__all__ = [
    # Common
    'ConfigManager',
    'ConfigError',
    'OutputManager',
    'OutputError',
    # Model
    'KanInfraDetModel',
    # Evaluation
    'EvalReport',
    'EvaluationError',
    'evaluate',
]
