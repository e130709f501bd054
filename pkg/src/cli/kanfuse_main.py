"""
KANFuse メインプロセッサ

データセット合成、3段階学習、評価（アブレーション表を含む）、勾配検証、
可視化、KAN 比較ベンチマークを1つの CLI にまとめた実行モジュール。

終了コード: 0 成功 / 1 検証失敗・実行時エラー / 2 使い方・設定のエラー
"""

import logging
import signal
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click

from src.evaluation.evaluator import REPORT_COLUMNS, EvalReport, Evaluator
from src.io.checkpoint import load_checkpoint, save_checkpoint
from src.io.config_manager import ConfigManager, ConfigError, deep_merge
from src.io.dataset_io import DatasetError, read_dataset, read_scene, write_dataset
from src.io.output_manager import OutputManager, load_detections
from src.model.bench import BENCH_COLUMNS, DEFAULT_EPOCHS, DEFAULT_HIDDEN, TIMING_COLUMNS, run_bench
from src.model.gradcheck import SCOPES, run_gradcheck
from src.model.network import ABLATION_PRESETS, build_model, make_checkpoint, model_from_checkpoint, predict
from src.model.trainer import EPOCH_LOG_COLUMNS, STAGE_SUMMARY_COLUMNS, STEP_LOG_COLUMNS, Trainer
from src.model.visualize import export_visualization
from src.synth.generator import generate_scene_set
from src.tensor.tensor import set_precision
from src.utils.parallel import resolve_max_workers

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class VerificationError(Exception):
    """検証失敗（終了コード1）"""
    pass


class KanfuseProcessor:
    """メイン処理クラス"""

    def __init__(self, config: Dict[str, Any]):
        """
        KanfuseProcessor初期化

        Args:
            config: 検証済みの設定辞書
        """
        self.config = config
        self.execution_config = self.config.get('execution', {})
        self.interrupted = False

        # シグナルハンドラー設定
        signal.signal(signal.SIGINT, self._signal_handler)
        signal.signal(signal.SIGTERM, self._signal_handler)

        # ログ設定
        self._setup_logging()

        # コンポーネント初期化
        self._initialize_components()

        # 処理統計
        self.processing_stats = {
            'command': None,
            'start_time': None,
            'end_time': None,
        }

        self.logger = logging.getLogger(__name__)
        self.logger.info("KanfuseProcessorを初期化しました")

    def _signal_handler(self, signum, frame):
        """シグナルハンドラー"""
        self.interrupted = True
        self.logger.warning(f"処理中断シグナルを受信しました: {signum}（次のステップ境界で停止します）")

    def _setup_logging(self):
        """ログ設定"""
        log_config = self.config.get('logging', {})
        log_file = self.config['output']['log_file']

        # ログディレクトリ作成
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)

        # ログレベル設定
        log_level = getattr(logging, log_config.get('level', 'INFO').upper())
        log_format = log_config.get('format', '%(asctime)s [%(levelname)s] %(name)s: %(message)s')

        # ロガー設定
        root_logger = logging.getLogger()
        root_logger.setLevel(log_level)

        # 既存ハンドラーをクリア
        for handler in root_logger.handlers[:]:
            root_logger.removeHandler(handler)

        # ファイルハンドラー
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(log_level)
        file_handler.setFormatter(logging.Formatter(log_format))
        root_logger.addHandler(file_handler)

        # コンソールハンドラー
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(log_level)
        console_handler.setFormatter(logging.Formatter(log_format))
        root_logger.addHandler(console_handler)

        # 外部ライブラリのログレベル調整
        logging.getLogger('PIL').setLevel(logging.WARNING)
        logging.getLogger('matplotlib').setLevel(logging.WARNING)

    def _initialize_components(self):
        """コンポーネント初期化"""
        self.run_config = ConfigManager().build_run_config(self.config)
        set_precision(self.run_config.execution.precision)
        try:
            self.output_manager = OutputManager(self.run_config.output_dir)
        except Exception as e:
            raise RuntimeError(f"コンポーネント初期化エラー: {str(e)}")

    def _begin(self, command: str):
        self.processing_stats['command'] = command
        self.processing_stats['start_time'] = datetime.now()
        self.logger.info(f"=== {command} 開始（シード={self.run_config.seed} "
                         f"精度={self.run_config.execution.precision}）===")

    def _dataset_dir(self, dataset_dir: Optional[str]) -> Path:
        return Path(dataset_dir or self.run_config.data.dataset_dir)

    def _max_workers(self, total_operations: int) -> int:
        return resolve_max_workers(self.run_config.execution.max_workers, total_operations)

    def synthesize(self, dataset_dir: Optional[str] = None) -> Dict[str, Any]:
        """合成データセットを生成して書き出す"""
        self._begin('synth')
        try:
            rc = self.run_config
            scene_set = rc.data.scene_set
            samples = generate_scene_set(rc.seed, scene_set, self._max_workers(scene_set.num_scenes))
            root = write_dataset(self._dataset_dir(dataset_dir), samples, scene_set, rc.seed,
                                 rc.data.split_sizes, config_hash=rc.dataset_hash)
            return self._create_result_summary(
                success=True, message=f"{len(samples)} シーンを生成しました",
                dataset=str(root), splits=rc.data.split_sizes, hotspot=scene_set.hotspot)
        finally:
            self.processing_stats['end_time'] = datetime.now()

    def train(self, dataset_dir: Optional[str] = None, split: str = 'train',
              checkpoint_name: str = 'checkpoint') -> Dict[str, Any]:
        """
        3段階学習を実行し、学習ログとチェックポイントを書き出す

        Raises:
            DatasetError: データセットの生成設定が現在の設定と一致しない
        """
        self._begin('train')
        try:
            rc = self.run_config
            dataset = read_dataset(self._dataset_dir(dataset_dir), [split])
            if dataset.config_hash != rc.dataset_hash:
                raise DatasetError(f"データセットの設定ハッシュが一致しません: "
                                   f"{dataset.config_hash[:12]} != {rc.dataset_hash[:12]}"
                                   f"（synth を同じ設定で再実行してください）")
            samples = dataset.split(split)

            model = build_model(rc)
            report = model.parameter_report()
            self.logger.info(f"パラメータ数: {report}")

            trainer = Trainer(model, rc.optimizer, seed=rc.seed, should_stop=lambda: self.interrupted)
            result, _ = trainer.train(samples)

            self.output_manager.save_csv(result.step_log, 'train_steps.csv', STEP_LOG_COLUMNS)
            self.output_manager.save_csv(result.epoch_log, 'train_epochs.csv', EPOCH_LOG_COLUMNS)
            self.output_manager.save_csv(result.stage_summary, 'train_stages.csv', STAGE_SUMMARY_COLUMNS)

            checkpoint = make_checkpoint(model, rc, self.config, interrupted=result.interrupted,
                                         stage=result.stage, step=result.steps)
            path = save_checkpoint(self.output_manager.path_for(checkpoint_name), checkpoint)

            message = (f"学習を中断しました（ステージ{result.stage} ステップ{result.steps}）"
                       if result.interrupted else f"学習完了: 最終loss={result.final_loss}")
            return self._create_result_summary(
                success=not result.interrupted, message=message, checkpoint=str(path),
                parameter_report=report, trainer_stats=trainer.get_stats())
        finally:
            self.processing_stats['end_time'] = datetime.now()

    def _write_report(self, report: EvalReport, prefix: str):
        self.output_manager.save_yaml({'report': report.to_dict(),
                                       'summary': report.summary_text().splitlines()},
                                      f"{prefix}eval_report.yaml")
        self.output_manager.save_csv(report.to_rows(), f"{prefix}eval_report.csv", REPORT_COLUMNS)

    def evaluate(self, checkpoints: Sequence[str] = (), detections_file: Optional[str] = None,
                 split: Optional[str] = None, strict: bool = False,
                 dataset_dir: Optional[str] = None) -> Dict[str, Any]:
        """
        評価を実行

        チェックポイントを複数指定した場合は、チェックポイントごとの結果を
        サブディレクトリに書き、アブレーション表（1行1チェックポイント）をまとめます。

        Raises:
            VerificationError: strict 指定時の設定ハッシュ不一致
        """
        self._begin('eval')
        try:
            rc = self.run_config
            split = split or rc.evaluation.split
            dataset = read_dataset(self._dataset_dir(dataset_dir), [split])
            samples = dataset.split(split)
            evaluator = Evaluator(rc.evaluation.iou_threshold, rc.evaluation.score_thresh,
                                  rc.evaluation.occlusion_threshold)
            reports: Dict[str, EvalReport] = {}

            if detections_file:
                report = evaluator.evaluate(load_detections(detections_file), samples)
                self._write_report(report, 'eval/' if not checkpoints else 'eval/from_file/')
                reports[Path(detections_file).name] = report

            ablation_rows: List[Dict[str, Any]] = []
            labels = self._checkpoint_labels(checkpoints)
            for label, checkpoint_path in zip(labels, checkpoints):
                checkpoint = load_checkpoint(checkpoint_path)
                if checkpoint.dataset_hash != dataset.config_hash:
                    message = (f"チェックポイント {label} の学習データ設定が評価データセットと一致しません: "
                               f"{checkpoint.dataset_hash[:12]} != {dataset.config_hash[:12]}")
                    if strict:
                        raise VerificationError(message)
                    self.logger.warning(message)
                if checkpoint.interrupted:
                    self.logger.warning(f"チェックポイント {label} は中断された学習のものです")

                model, model_rc = model_from_checkpoint(checkpoint)
                preds = predict(model, samples, batch_size=model_rc.optimizer.batch_size,
                                score_thresh=rc.evaluation.decode_score_thresh,
                                nms_iou=rc.evaluation.nms_iou,
                                max_workers=self._max_workers(len(samples)))
                report = evaluator.evaluate(preds, samples)
                prefix = 'eval/' if len(checkpoints) == 1 else f"eval/{label}/"
                self._write_report(report, prefix)
                self.output_manager.save_detections(preds, f"{prefix}detections.txt")
                reports[label] = report
                ablation_rows.append({'checkpoint': label, **model_rc.ablation.to_dict(),
                                      **report.summary_row()})

            if len(ablation_rows) > 1:
                self.output_manager.save_csv(ablation_rows, 'eval/ablation.csv')

            return self._create_result_summary(
                success=True, message=f"評価完了: {len(reports)} 件（分割 {split}, {len(samples)} シーン）",
                summaries={label: report.summary_text() for label, report in reports.items()},
                evaluator_stats=evaluator.get_stats())
        finally:
            self.processing_stats['end_time'] = datetime.now()

    @staticmethod
    def _checkpoint_labels(checkpoints: Sequence[str]) -> List[str]:
        """チェックポイントの表示名（ディレクトリ名、重複時は連番付き）"""
        labels: List[str] = []
        for i, path in enumerate(checkpoints):
            label = Path(path).name or f"checkpoint{i}"
            labels.append(label if label not in labels else f"{label}_{i}")
        return labels

    def gradcheck(self, scope: str = 'all', corrupt: Sequence[str] = ()) -> Dict[str, Any]:
        """勾配検証を実行し、レポートを書き出す"""
        self._begin('gradcheck')
        try:
            tolerance = self.run_config.execution.gradcheck_tolerance
            results = run_gradcheck(scope, tolerance=tolerance, seed=self.run_config.seed, corrupt=corrupt)
            failed = [r.name for r in results if not r.passed]
            path = self.output_manager.save_yaml({
                'scope': scope,
                'tolerance': tolerance,
                'passed': not failed,
                'results': [r.to_dict() for r in results],
            }, 'gradcheck.yaml')
            message = (f"勾配検証: {len(results)} 件すべて合格" if not failed
                       else f"勾配検証: 不合格 {failed}")
            return self._create_result_summary(
                success=not failed, message=message, report_file=str(path),
                results=[(r.scope, r.name, r.max_rel_error, r.passed) for r in results])
        finally:
            self.processing_stats['end_time'] = datetime.now()

    def visualize(self, checkpoint_path: str, scene_id: Optional[str] = None,
                  query_cell: Optional[Tuple[int, int]] = None, split: Optional[str] = None,
                  dataset_dir: Optional[str] = None) -> Dict[str, Any]:
        """1シーンの特徴マップとアテンション重みを書き出す"""
        self._begin('vis')
        try:
            root = self._dataset_dir(dataset_dir)
            if scene_id:
                sample = read_scene(root, scene_id)
            else:
                split = split or self.run_config.evaluation.split
                sample = read_dataset(root, [split]).split(split)[0]
            model, _ = model_from_checkpoint(load_checkpoint(checkpoint_path))
            scene = sample.scene.scene_id
            result = export_visualization(model, sample, self.output_manager, query_cell,
                                          prefix=f"vis/{scene}/")
            return self._create_result_summary(
                success=True, message=f"可視化完了: シーン {scene}（{len(result.files)} ファイル）",
                gini=result.gini, query_cell=result.query_cell)
        finally:
            self.processing_stats['end_time'] = datetime.now()

    def bench(self, hidden: Sequence[int] = DEFAULT_HIDDEN, epochs: int = DEFAULT_EPOCHS) -> Dict[str, Any]:
        """KAN と通常層の比較ベンチマーク"""
        self._begin('bench')
        try:
            result = run_bench(hidden, epochs, seed=self.run_config.seed, grid=self.run_config.model.grid,
                               progress=self.logger.info)
            path = self.output_manager.save_csv(result.rows, 'bench.csv', BENCH_COLUMNS)
            self.output_manager.save_csv(result.timings, 'bench_timing.csv', TIMING_COLUMNS)
            parity = result.parity_ok()
            message = ("ベンチマーク完了" if parity
                       else "ベンチマーク完了（パラメータ数の差が許容範囲を超えた組があります）")
            return self._create_result_summary(success=parity, message=message, bench_file=str(path))
        finally:
            self.processing_stats['end_time'] = datetime.now()

    def _create_result_summary(self, success: bool, message: Optional[str] = None,
                               **details: Any) -> Dict[str, Any]:
        """結果サマリー作成"""
        end_time = datetime.now()
        start_time = self.processing_stats['start_time'] or end_time
        duration = end_time - start_time

        result = {
            'success': success,
            'command': self.processing_stats['command'],
            'start_time': start_time.isoformat(),
            'end_time': end_time.isoformat(),
            'duration_seconds': duration.total_seconds(),
            'component_stats': {
                'output_manager': self.output_manager.get_stats(),
            },
        }
        if message:
            result['message'] = message
        result.update(details)
        return result


def _load_config(options: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """グローバルオプションとコマンド固有の上書きを反映して設定を読み込む"""
    merged: Dict[str, Any] = {}
    if options.get('seed') is not None:
        merged['seed'] = options['seed']
    if options.get('precision'):
        merged['execution'] = {'precision': options['precision']}
    if options.get('out'):
        merged['output'] = {'dir': options['out']}
    if options.get('verbose'):
        merged['logging'] = {'level': 'DEBUG'}
    merged = deep_merge(merged, overrides or {})
    return ConfigManager().load_config(options.get('config'), merged)


def _execute(ctx: click.Context, action, overrides: Optional[Dict[str, Any]] = None):
    """設定読み込み → 処理 → 結果表示 → 終了コード"""
    try:
        processor = KanfuseProcessor(_load_config(ctx.obj, overrides))
        results = action(processor)
    except ConfigError as e:
        click.echo(f" 設定エラー: {str(e)}")
        sys.exit(EXIT_USAGE)
    except VerificationError as e:
        click.echo(f" 検証エラー: {str(e)}")
        sys.exit(EXIT_FAILURE)
    except DatasetError as e:
        click.echo(f" データセットエラー: {str(e)}")
        sys.exit(EXIT_FAILURE)
    except Exception as e:
        logger.exception("予期しないエラー")
        click.echo(f" 予期しないエラー: {str(e)}")
        sys.exit(EXIT_FAILURE)

    mark = '処理完了' if results['success'] else '処理失敗'
    click.echo(f" {mark}: {results.get('message', '')}")
    for label, text in results.get('summaries', {}).items():
        click.echo(f"\n[{label}]\n{text}")
    for scope, name, error, passed in results.get('results', []):
        click.echo(f"  {'OK' if passed else 'NG'} {scope}/{name}: {error:.3e}")
    sys.exit(EXIT_OK if results['success'] else EXIT_FAILURE)


# CLI インターフェース
@click.group()
@click.option('--config', '-c', default=None, type=click.Path(exists=True, dir_okay=False),
              help='設定ファイルパス（省略時は既定値）')
@click.option('--seed', type=int, default=None, help='実行シード（設定ファイルを上書き）')
@click.option('--precision', type=click.Choice(['f32', 'f64']), default=None, help='浮動小数精度')
@click.option('--out', type=click.Path(file_okay=False), default=None, help='出力ディレクトリ')
@click.option('--verbose', '-v', is_flag=True, help='詳細ログ出力')
@click.pass_context
def cli(ctx: click.Context, config: Optional[str], seed: Optional[int], precision: Optional[str],
        out: Optional[str], verbose: bool):
    """KANFuse - KAN カメラ・LiDAR 融合 3D 検出器"""
    ctx.obj = {'config': config, 'seed': seed, 'precision': precision, 'out': out, 'verbose': verbose}


@cli.command()
@click.option('--dataset', default=None, type=click.Path(file_okay=False), help='データセット出力先')
@click.pass_context
def synth(ctx: click.Context, dataset: Optional[str]):
    """合成データセットを生成"""
    _execute(ctx, lambda p: p.synthesize(dataset))


@cli.command()
@click.option('--dataset', default=None, type=click.Path(file_okay=False), help='データセットディレクトリ')
@click.option('--split', default='train', help='学習に使う分割')
@click.option('--preset', type=click.Choice(sorted(ABLATION_PRESETS)), default=None,
              help='アブレーションプリセット')
@click.option('--checkpoint', 'checkpoint_name', default='checkpoint', help='チェックポイント名（出力ディレクトリ内）')
@click.pass_context
def train(ctx: click.Context, dataset: Optional[str], split: str, preset: Optional[str], checkpoint_name: str):
    """3段階学習を実行"""
    overrides = {'ablation': {'preset': preset}} if preset else None
    _execute(ctx, lambda p: p.train(dataset, split, checkpoint_name), overrides)


@cli.command(name='eval')
@click.option('--checkpoint', 'checkpoints', multiple=True, type=click.Path(exists=True, file_okay=False),
              help='チェックポイント（複数指定でアブレーション表を出力）')
@click.option('--detections', type=click.Path(exists=True, dir_okay=False), default=None,
              help='保存済み検出ファイルを評価')
@click.option('--dataset', default=None, type=click.Path(file_okay=False), help='データセットディレクトリ')
@click.option('--split', default=None, help='評価する分割（省略時は設定値）')
@click.option('--strict', is_flag=True, help='設定ハッシュ不一致をエラーにする')
@click.pass_context
def eval_command(ctx: click.Context, checkpoints: Tuple[str, ...], detections: Optional[str],
                 dataset: Optional[str], split: Optional[str], strict: bool):
    """評価を実行"""
    if not checkpoints and not detections:
        raise click.UsageError('--checkpoint または --detections を指定してください')
    _execute(ctx, lambda p: p.evaluate(checkpoints, detections, split, strict, dataset))


@cli.command()
@click.option('--scope', type=click.Choice(('all',) + SCOPES), default='all', help='検証範囲')
@click.option('--corrupt', multiple=True, help='解析勾配を崩す検証ケース名（自己テスト用）')
@click.pass_context
def gradcheck(ctx: click.Context, scope: str, corrupt: Tuple[str, ...]):
    """勾配検証（中心差分との比較）を実行"""
    _execute(ctx, lambda p: p.gradcheck(scope, corrupt))


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False),
              help='チェックポイント')
@click.option('--scene', default=None, help='シーンID（省略時は評価分割の先頭）')
@click.option('--query-cell', nargs=2, type=int, default=None, help='アテンション表示のクエリセル (行 列)')
@click.option('--dataset', default=None, type=click.Path(file_okay=False), help='データセットディレクトリ')
@click.pass_context
def vis(ctx: click.Context, checkpoint: str, scene: Optional[str], query_cell: Optional[Tuple[int, int]],
        dataset: Optional[str]):
    """特徴マップ・アテンション重みを画像として出力"""
    _execute(ctx, lambda p: p.visualize(checkpoint, scene, tuple(query_cell) if query_cell else None,
                                        dataset_dir=dataset))


@cli.command()
@click.option('--hidden', multiple=True, type=click.IntRange(min=1), help='KAN の隠れ幅（複数指定可）')
@click.option('--epochs', type=click.IntRange(min=0), default=DEFAULT_EPOCHS, show_default=True,
              help='学習エポック数（0 で初期 MSE のみ）')
@click.pass_context
def bench(ctx: click.Context, hidden: Tuple[int, ...], epochs: int):
    """KAN と通常層の比較ベンチマーク"""
    _execute(ctx, lambda p: p.bench(hidden or DEFAULT_HIDDEN, epochs))


if __name__ == '__main__':
    cli()
