"""
モデルモジュール

融合検出ネットワーク、3段階学習、勾配検証、比較ベンチマーク、可視化を提供。
"""

from src.model.network import (
    ABLATION_PRESETS,
    KanInfraDetModel,
    build_model,
    make_checkpoint,
    model_from_checkpoint,
    predict,
)
from src.model.trainer import TrainResult, Trainer, TrainingError
from src.model.gradcheck import GradCheckError, GradCheckResult, run_gradcheck
from src.model.bench import BenchError, BenchResult, run_bench
from src.model.visualize import VisResult, VisualizationError, export_visualization

__all__ = [
    'ABLATION_PRESETS',
    'KanInfraDetModel',
    'build_model',
    'make_checkpoint',
    'model_from_checkpoint',
    'predict',
    'TrainResult',
    'Trainer',
    'TrainingError',
    'GradCheckError',
    'GradCheckResult',
    'run_gradcheck',
    'BenchError',
    'BenchResult',
    'run_bench',
    'VisResult',
    'VisualizationError',
    'export_visualization',
]
