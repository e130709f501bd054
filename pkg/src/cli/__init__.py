"""
CLI エントリポイント

synth / train / eval / gradcheck / vis / bench の各コマンドを提供。
"""

from src.cli.kanfuse_main import KanfuseProcessor, cli

__all__ = ['KanfuseProcessor', 'cli']
