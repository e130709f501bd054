"""
評価モジュール

難易度区分、貪欲マッチング、40点補間 AP、EvalReport を提供。
"""

from src.evaluation.difficulty import TIERS, DifficultyTier, classify_difficulty
from src.evaluation.matching import MatchResult, match_detections
from src.evaluation.ap import average_precision
from src.evaluation.evaluator import EvalReport, EvaluationError, EvaluationStats, Evaluator, evaluate

__all__ = [
    'TIERS',
    'DifficultyTier',
    'classify_difficulty',
    'MatchResult',
    'match_detections',
    'average_precision',
    'EvalReport',
    'EvaluationError',
    'EvaluationStats',
    'Evaluator',
    'evaluate',
]
