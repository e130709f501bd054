"""
fusion パッケージ（BEV 埋め込み・クロスアテンション・フューザー）のユニットテスト
"""

import numpy as np
import pytest

from src.fusion.bev import BevFeature, BevShapeError, downsample_bev, embed_bev, unflatten, upsample_bev
from src.fusion.cross_attn import (
    AttentionError,
    CameraLidarCrossAttn,
    MultiHeadCrossAttention,
    cross_attention_head,
    multi_head_cross_attention,
)
from src.fusion.fuser import ConvKanFuser, conv_kan_fuse
from src.tensor import ops
from src.tensor.tensor import Tensor


class TestBevEmbedding:
    """BEV の縮小・埋め込み"""

    def test_embed_unflatten_round_trip(self, rng):
        """埋め込みと復元がビット単位で往復すること"""
        f = Tensor(rng.normal(size=(2, 3, 4, 5)))
        embedding = embed_bev(f)
        assert embedding.sequence.shape == (2, 20, 3)
        assert embedding.spatial == (4, 5)
        np.testing.assert_array_equal(unflatten(embedding).data, f.data)

    def test_row_major_order(self):
        """系列が行優先・チャネル末尾で並ぶこと"""
        f = Tensor(np.arange(2 * 2 * 3, dtype=np.float64).reshape(1, 2, 2, 3))
        sequence = embed_bev(f).sequence.data[0]
        np.testing.assert_array_equal(sequence[1], [1.0, 7.0])
        np.testing.assert_array_equal(sequence[3], [3.0, 9.0])

    def test_downsample_indivisible(self, rng):
        """縮小率で割り切れない BEV はエラーになること"""
        with pytest.raises(BevShapeError):
            downsample_bev(Tensor(rng.normal(size=(1, 1, 6, 5))), 2)

    def test_downsample_upsample_sizes(self, rng):
        """縮小・拡大で空間サイズが戻ること"""
        f = BevFeature(Tensor(rng.normal(size=(1, 2, 6, 12))), source='lidar')
        small = downsample_bev(f, 3)
        assert small.shape == (1, 2, 2, 4)
        assert upsample_bev(small, 3).shape == (1, 2, 6, 12)

    def test_unknown_source(self, rng):
        """未知の BEV ソースはエラーになること"""
        with pytest.raises(BevShapeError):
            BevFeature(Tensor(rng.normal(size=(1, 1, 2, 2))), source='radar')


class TestCrossAttention:
    """クロスアテンション"""

    def test_rows_are_stochastic(self, rng):
        """アテンション重みの各行の和が 1 になること"""
        query = embed_bev(Tensor(rng.normal(size=(2, 4, 3, 3))))
        key_value = embed_bev(Tensor(rng.normal(size=(2, 4, 3, 3))))
        wq, wk, wv = (Tensor(rng.normal(size=(2, 4))) for _ in range(3))
        out, weights = cross_attention_head(query, key_value, wq, wk, wv)
        assert out.shape == (2, 9, 2)
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones((2, 9)), atol=1e-6)
        assert np.all(weights.data >= 0.0)

    def test_single_key_returns_value(self, rng):
        """キーが1つならヘッド出力は V そのものになること"""
        query = embed_bev(Tensor(rng.normal(size=(1, 4, 1, 1))))
        key_value = embed_bev(Tensor(rng.normal(size=(1, 4, 1, 1))))
        wq, wk, wv = (Tensor(rng.normal(size=(2, 4))) for _ in range(3))
        out, weights = cross_attention_head(query, key_value, wq, wk, wv)
        np.testing.assert_array_equal(weights.data, np.ones((1, 1, 1)))
        np.testing.assert_allclose(out.data, key_value.sequence.data @ wv.data.T, atol=1e-15)

    def test_indivisible_heads(self):
        """ヘッド数がチャネル数を割り切らなければエラーになること"""
        with pytest.raises(AttentionError):
            MultiHeadCrossAttention(channels=6, heads=4)

    def test_multi_head_records_weights(self, rng):
        """マルチヘッドの出力形状と重みの記録"""
        attention = MultiHeadCrossAttention(channels=4, heads=2, rng=rng)
        query = embed_bev(Tensor(rng.normal(size=(1, 4, 2, 3))))
        key_value = embed_bev(Tensor(rng.normal(size=(1, 4, 2, 3))))
        out = multi_head_cross_attention(query, key_value, attention)
        assert out.sequence.shape == (1, 6, 4)
        assert attention.last_weights.shape == (1, 2, 6, 6)

    def test_shape_mismatch(self, rng):
        """クエリとキー/バリューの形状不一致はエラーになること"""
        attention = MultiHeadCrossAttention(channels=4, heads=2, rng=rng)
        query = embed_bev(Tensor(rng.normal(size=(1, 4, 2, 2))))
        key_value = embed_bev(Tensor(rng.normal(size=(1, 4, 2, 3))))
        with pytest.raises(AttentionError):
            multi_head_cross_attention(query, key_value, attention)

    def test_block_keeps_full_resolution(self, rng):
        """CrossAttn ブロックの出力がフル解像度に戻ること"""
        block = CameraLidarCrossAttn(channels=4, heads=2, factor=2, rng=rng)
        lidar = Tensor(rng.normal(size=(1, 4, 4, 6)))
        camera = Tensor(rng.normal(size=(1, 4, 4, 6)), requires_grad=True)
        out = block(lidar, camera)
        assert out.shape == (1, 4, 4, 6)
        assert block.last_spatial == (2, 3)
        assert block.last_weights.shape == (1, 2, 6, 6)
        ops.reduce_sum(out * out).backward()
        assert camera.grad is not None and np.abs(camera.grad).sum() > 0

    def test_block_rejects_mismatched_maps(self, rng):
        """LiDAR とカメラの形状不一致はエラーになること"""
        block = CameraLidarCrossAttn(channels=4, heads=2, factor=2, rng=rng)
        with pytest.raises(AttentionError):
            block(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 4, 6))))


class TestFuser:
    """ConvKAN フューザー"""

    @pytest.mark.parametrize('use_kan', [True, False])
    def test_output_shape(self, rng, use_kan):
        """出力が (b, out, h, w) で非負（ReLU 後）になること"""
        fuser = ConvKanFuser(3, 2, 4, use_kan=use_kan, rng=rng)
        out = fuser(Tensor(rng.normal(size=(2, 3, 5, 5))), Tensor(rng.normal(size=(2, 2, 5, 5))))
        assert out.shape == (2, 4, 5, 5)
        assert np.all(out.data >= 0.0)

    def test_spatial_mismatch(self, rng):
        """空間サイズの不一致はエラーになること"""
        fuser = ConvKanFuser(2, 2, 2, rng=rng)
        with pytest.raises(BevShapeError):
            conv_kan_fuse(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))), fuser)

    def test_channel_mismatch(self, rng):
        """チャネル数の不一致はエラーになること"""
        fuser = ConvKanFuser(2, 2, 2, rng=rng)
        with pytest.raises(BevShapeError):
            conv_kan_fuse(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 4, 4))), fuser)
