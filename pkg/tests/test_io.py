"""
io パッケージ（テンソル形式・データセット・チェックポイント・出力管理）のユニットテスト
"""

import struct

import numpy as np
import pandas as pd
import pytest
import yaml
from PIL import Image

from src.detection.boxes import Box3D
from src.io.checkpoint import Checkpoint, CheckpointError, checkpoint_exists, load_checkpoint, save_checkpoint
from src.io.dataset_io import (
    CAMERA_NAME,
    CLOUD_NAME,
    MANIFEST_NAME,
    SCENES_DIR,
    DatasetError,
    assign_splits,
    read_dataset,
    read_manifest,
    write_dataset,
)
from src.io.output_manager import OutputError, OutputManager, format_detection, load_detections, parse_detection
from src.io.tensor_io import (
    TensorFormatError,
    decode_kft1,
    encode_kft1,
    load_kfpc,
    load_kft1,
    save_kfpc,
    save_kft1,
)
from src.synth.generator import generate_scene_set, synthesize_sample
from src.synth.scene import LidarPose, SceneSetConfig


@pytest.fixture
def tiny_cfg():
    return SceneSetConfig(num_scenes=3, min_objects=1, max_objects=3,
                          lidar=LidarPose(azimuth_steps=40, elevation_steps=12),
                          image_size=(24, 32), camera_channels=3)


@pytest.fixture
def dataset_dir(tmp_path, tiny_cfg):
    samples = generate_scene_set(17, tiny_cfg)
    root = write_dataset(tmp_path / 'data', samples, tiny_cfg, master_seed=17,
                         split_sizes={'train': 2, 'val': 1}, config_hash='abc123')
    return root, samples


class TestKft1:
    """KFT1 形式のテスト"""

    def test_header_layout(self):
        """マジック・dtype・ランク・次元がリトルエンディアンで並ぶ"""
        payload = encode_kft1(np.zeros((2, 3), dtype=np.float32))
        assert payload[:4] == b'KFT1'
        assert payload[4] == 0
        assert payload[5] == 2
        assert struct.unpack_from('<2Q', payload, 6) == (2, 3)
        assert len(payload) == 6 + 16 + 2 * 3 * 4

    def test_values_and_dtype_preserved(self, tmp_path):
        """値・形状・dtype がビット単位で保存される"""
        array = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0
        save_kft1(tmp_path / 'a.kft', array)
        loaded = load_kft1(tmp_path / 'a.kft')
        assert loaded.dtype == np.float64
        np.testing.assert_array_equal(loaded, array)

    def test_scalar_rank_zero(self):
        """ランク0のテンソルも扱える"""
        loaded = decode_kft1(encode_kft1(np.array(2.5, dtype=np.float32)))
        assert loaded.shape == ()
        assert float(loaded) == 2.5

    def test_unsupported_dtype(self):
        """整数配列は TensorFormatError"""
        with pytest.raises(TensorFormatError):
            encode_kft1(np.zeros(3, dtype=np.int32))

    @pytest.mark.parametrize('mutate', [
        lambda p: b'XXXX' + p[4:],
        lambda p: p[:-1],
        lambda p: p[:4] + b'\x07' + p[5:],
        lambda p: p[:8],
    ])
    def test_corrupt_payload(self, mutate):
        """マジック不正・切り詰め・未知の dtype は TensorFormatError"""
        payload = encode_kft1(np.ones((2, 2), dtype=np.float64))
        with pytest.raises(TensorFormatError):
            decode_kft1(mutate(payload))

    def test_missing_file(self, tmp_path):
        """存在しないファイルは TensorFormatError"""
        with pytest.raises(TensorFormatError):
            load_kft1(tmp_path / 'missing.kft')


class TestKfpc:
    """KFPC 形式のテスト"""

    def test_round_trip(self, tmp_path):
        """N×4 float32 の点群がそのまま戻る"""
        points = np.array([[1.0, 2.0, 3.0, 0.5], [-1.0, 0.0, 0.25, 0.1]], dtype=np.float32)
        save_kfpc(tmp_path / 'c.kfpc', points)
        np.testing.assert_array_equal(load_kfpc(tmp_path / 'c.kfpc'), points)

    def test_empty_cloud(self, tmp_path):
        """点数0も保存できる"""
        save_kfpc(tmp_path / 'e.kfpc', np.zeros((0, 4), dtype=np.float32))
        assert load_kfpc(tmp_path / 'e.kfpc').shape == (0, 4)

    def test_wrong_shape(self, tmp_path):
        """N×4 以外は TensorFormatError"""
        with pytest.raises(TensorFormatError):
            save_kfpc(tmp_path / 'bad.kfpc', np.zeros((3, 3), dtype=np.float32))

    def test_truncated(self, tmp_path):
        """途中で切れたファイルは TensorFormatError"""
        path = tmp_path / 'c.kfpc'
        save_kfpc(path, np.ones((5, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TensorFormatError):
            load_kfpc(path)


class TestDataset:
    """データセット入出力のテスト"""

    def test_layout(self, dataset_dir):
        """マニフェストとシーンごとのファイルが作られる"""
        root, samples = dataset_dir
        assert (root / MANIFEST_NAME).exists()
        for sample in samples:
            scene_dir = root / SCENES_DIR / sample.scene.scene_id
            assert (scene_dir / CLOUD_NAME).exists()
            assert (scene_dir / CAMERA_NAME).exists()

    def test_manifest_contents(self, dataset_dir):
        """マニフェストにシード・設定ハッシュ・分割が記録される"""
        root, samples = dataset_dir
        manifest = read_manifest(root)
        assert manifest['master_seed'] == 17
        assert manifest['config_hash'] == 'abc123'
        assert manifest['seeds'] == [s.scene.seed for s in samples]
        assert manifest['splits'] == {'train': ['scene_00000', 'scene_00001'], 'val': ['scene_00002']}

    def test_read_back_bit_exact(self, dataset_dir):
        """読み戻したシーン・点群・カメラ特徴は書き出し前と一致する"""
        root, samples = dataset_dir
        dataset = read_dataset(root)
        assert dataset.config_hash == 'abc123'
        for original, loaded in zip(samples, dataset.samples):
            assert loaded.scene.boxes == original.scene.boxes
            assert loaded.scene.occluders == original.scene.occluders
            assert loaded.scene.point_counts == original.scene.point_counts
            assert loaded.scene.occlusion == original.scene.occlusion
            np.testing.assert_array_equal(loaded.cloud.points, original.cloud.points)
            np.testing.assert_array_equal(loaded.camera_features, original.camera_features)

    def test_regenerate_from_manifest(self, dataset_dir):
        """マニフェストのシードと設定から同じシーンを再生成できる"""
        root, samples = dataset_dir
        dataset = read_dataset(root)
        for entry, original in zip(dataset.manifest['scenes'], samples):
            again = synthesize_sample(entry['seed'], dataset.scene_set, entry['id'])
            assert again.scene.boxes == original.scene.boxes
            np.testing.assert_array_equal(again.cloud.points, original.cloud.points)

    def test_split_selection(self, dataset_dir):
        """分割を指定するとそのシーンだけ読み込む"""
        root, _ = dataset_dir
        dataset = read_dataset(root, splits=['val'])
        assert [s.scene.scene_id for s in dataset.samples] == ['scene_00002']
        assert len(dataset.split('val')) == 1
        with pytest.raises(DatasetError):
            dataset.split('test')

    def test_unknown_split(self, dataset_dir):
        """存在しない分割の指定は DatasetError"""
        root, _ = dataset_dir
        with pytest.raises(DatasetError):
            read_dataset(root, splits=['test'])

    def test_truncated_cloud_names_scene(self, dataset_dir):
        """点群ファイルが壊れていればシーンIDを含む DatasetError"""
        root, _ = dataset_dir
        path = root / SCENES_DIR / 'scene_00001' / CLOUD_NAME
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(DatasetError) as exc_info:
            read_dataset(root)
        assert exc_info.value.scene_id == 'scene_00001'
        assert 'scene_00001' in str(exc_info.value)

    def test_missing_camera_file(self, dataset_dir):
        """カメラ特徴ファイルの欠落も DatasetError"""
        root, _ = dataset_dir
        (root / SCENES_DIR / 'scene_00000' / CAMERA_NAME).unlink()
        with pytest.raises(DatasetError) as exc_info:
            read_dataset(root)
        assert exc_info.value.scene_id == 'scene_00000'

    def test_missing_manifest(self, tmp_path):
        """マニフェストがなければ DatasetError"""
        with pytest.raises(DatasetError):
            read_manifest(tmp_path)

    def test_assign_splits_size_mismatch(self):
        """分割サイズの合計がシーン数と違えば DatasetError"""
        assert assign_splits(['a', 'b', 'c'], {'train': 2, 'val': 1}) == {'train': ['a', 'b'], 'val': ['c']}
        with pytest.raises(DatasetError):
            assign_splits(['a', 'b'], {'train': 2, 'val': 1})

    def test_duplicate_scene_ids(self, tmp_path, tiny_cfg):
        """シーンIDの重複は DatasetError"""
        sample = synthesize_sample(1, tiny_cfg, 'scene_00000')
        with pytest.raises(DatasetError):
            write_dataset(tmp_path / 'dup', [sample, sample], tiny_cfg, 1, {'train': 2})


class TestCheckpoint:
    """チェックポイント入出力のテスト"""

    @pytest.fixture
    def checkpoint(self):
        state = {
            'point_encoder.pfn1.weight': np.arange(6, dtype=np.float64).reshape(2, 3),
            'head.bias': np.array([0.5, -0.5]),
        }
        return Checkpoint(state=state, config={'model': {'use_kan': True}}, config_hash='c1',
                          dataset_hash='d1', grid={'grid_size': 5, 'spline_order': 3},
                          parameter_report={'total': 8}, stage=3, step=12)

    def test_round_trip(self, tmp_path, checkpoint):
        """テンソルとメタデータがそのまま戻る"""
        save_checkpoint(tmp_path / 'ckpt', checkpoint)
        assert checkpoint_exists(tmp_path / 'ckpt')
        loaded = load_checkpoint(tmp_path / 'ckpt')
        assert set(loaded.state) == set(checkpoint.state)
        for name, array in checkpoint.state.items():
            np.testing.assert_array_equal(loaded.state[name], array)
        assert loaded.config == checkpoint.config
        assert loaded.config_hash == 'c1'
        assert loaded.dataset_hash == 'd1'
        assert loaded.grid == {'grid_size': 5, 'spline_order': 3}
        assert loaded.stage == 3
        assert loaded.step == 12
        assert loaded.interrupted is False

    def test_interrupted_flag(self, tmp_path, checkpoint):
        """中断フラグが記録される"""
        checkpoint.interrupted = True
        save_checkpoint(tmp_path / 'ckpt', checkpoint)
        assert load_checkpoint(tmp_path / 'ckpt').interrupted is True

    def test_missing(self, tmp_path):
        """存在しないチェックポイントは CheckpointError"""
        assert not checkpoint_exists(tmp_path / 'none')
        assert not checkpoint_exists(None)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / 'none')

    def test_shape_mismatch(self, tmp_path, checkpoint):
        """マニフェストと形状が違うテンソルは CheckpointError"""
        root = save_checkpoint(tmp_path / 'ckpt', checkpoint)
        save_kft1(root / 'tensors' / 'head.bias.kft', np.zeros(3))
        with pytest.raises(CheckpointError):
            load_checkpoint(root)

    def test_missing_tensor(self, tmp_path, checkpoint):
        """テンソルファイルの欠落は CheckpointError"""
        root = save_checkpoint(tmp_path / 'ckpt', checkpoint)
        (root / 'tensors' / 'head.bias.kft').unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(root)


class TestOutputManager:
    """出力管理のテスト"""

    def test_yaml_and_csv(self, tmp_path):
        """YAML と CSV を保存し統計を更新する"""
        output = OutputManager(tmp_path / 'out')
        yaml_path = output.save_yaml({'ap': np.float64(0.5), 'classes': ('car',)}, 'report.yaml')
        csv_path = output.save_csv([{'step': 1, 'loss': 0.25}, {'step': 2, 'loss': 0.125}], 'log.csv')

        with open(yaml_path, encoding='utf-8') as f:
            assert yaml.safe_load(f) == {'ap': 0.5, 'classes': ['car']}
        df = pd.read_csv(csv_path)
        assert list(df.columns) == ['step', 'loss']
        assert len(df) == 2

        stats = output.get_stats()
        assert stats['yaml_files_created'] == 1
        assert stats['csv_files_created'] == 1
        assert stats['csv_rows_written'] == 2
        output.reset_stats()
        assert output.get_stats()['csv_rows_written'] == 0

    def test_subdirectory_and_sanitize(self, tmp_path):
        """サブディレクトリを作成し、危険な文字を置換する"""
        output = OutputManager(tmp_path)
        path = output.save_yaml({'a': 1}, 'run/a:b.yaml')
        assert path.parent == tmp_path / 'run'
        assert path.name == 'a_b.yaml'

    def test_detections(self, tmp_path):
        """検出結果は1行1レコードで保存され、読み戻せる"""
        output = OutputManager(tmp_path)
        boxes = {'scene_00000': [Box3D(1.0, 2.0, 0.8, 1.8, 4.2, 1.6, 0.3, 0, 0.9),
                                 Box3D(5.0, -2.0, 0.9, 0.6, 0.6, 1.7, 0.0, 2, 0.4)],
                 'scene_00001': []}
        path = output.save_detections(boxes, 'detections.yaml')
        lines = [line for line in path.read_text(encoding='utf-8').splitlines() if line.strip()]
        assert len(lines) == 2
        assert output.get_stats()['detections_written'] == 2

        loaded = load_detections(path)
        assert loaded == {'scene_00000': boxes['scene_00000']}

    def test_detection_record_fields(self):
        """レコードはクラス名と10個のフィールドを持つ"""
        line = format_detection('s', Box3D(1.0, 2.0, 0.5, 1.0, 2.0, 1.0, 0.0, 1, 0.7))
        record = yaml.safe_load(line)
        assert list(record) == ['scene', 'class', 'score', 'x', 'y', 'z', 'w', 'l', 'h', 'yaw']
        assert record['class'] == 'truck'
        assert parse_detection(line)[0] == 's'

    def test_bad_detection_record(self):
        """未知のクラスや欠けたフィールドは OutputError"""
        with pytest.raises(OutputError):
            parse_detection("{scene: s, class: bus, score: 1, x: 0, y: 0, z: 0, w: 1, l: 1, h: 1, yaw: 0}")
        with pytest.raises(OutputError):
            parse_detection("{scene: s, class: car}")
        with pytest.raises(OutputError):
            format_detection('s', Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, -1))

    def test_image(self, tmp_path):
        """8ビットグレースケール PNG を保存する"""
        output = OutputManager(tmp_path)
        image = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        path = output.save_image(image, 'a.png')
        with Image.open(path) as loaded:
            assert loaded.mode == 'L'
            np.testing.assert_array_equal(np.asarray(loaded), image)
        with pytest.raises(OutputError):
            output.save_image(np.zeros((3, 4)), 'b.png')

    def test_tensor(self, tmp_path):
        """KFT1 テンソルを保存する"""
        output = OutputManager(tmp_path)
        array = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
        path = output.save_tensor(array, 'attention.kft')
        np.testing.assert_array_equal(load_kft1(path), array)
        assert output.get_stats()['tensors_created'] == 1
