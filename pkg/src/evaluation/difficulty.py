"""
難易度区分モジュール

距離・箱内点数・遮蔽率から Easy / Moderate / Hard を決めます。
"""

from enum import Enum

EASY_MIN_POINTS = 50
EASY_MAX_DISTANCE = 40.0
HARD_MAX_POINTS = 20
HARD_MIN_DISTANCE = 50.0
DEFAULT_OCCLUSION_THRESHOLD = 0.1


class DifficultyTier(str, Enum):
    """難易度区分"""
    EASY = 'easy'
    MODERATE = 'moderate'
    HARD = 'hard'

    @property
    def label(self) -> str:
        return self.value.capitalize()


TIERS = (DifficultyTier.EASY, DifficultyTier.MODERATE, DifficultyTier.HARD)


def classify_difficulty(distance_m: float, point_count: int, occlusion_frac: float,
                        occlusion_threshold: float = DEFAULT_OCCLUSION_THRESHOLD) -> DifficultyTier:
    """
    難易度を判定

    Easy: 点数 > 50 かつ 距離 < 40 m かつ 遮蔽率 < 閾値
    Hard: 上記以外で 点数 < 20 または 距離 > 50 m
    Moderate: それ以外
    """
    if point_count > EASY_MIN_POINTS and distance_m < EASY_MAX_DISTANCE and occlusion_frac < occlusion_threshold:
        return DifficultyTier.EASY
    if point_count < HARD_MAX_POINTS or distance_m > HARD_MIN_DISTANCE:
        return DifficultyTier.HARD
    return DifficultyTier.MODERATE
