"""
encoders パッケージ（ピラー化・PointEncoder・カメラブランチ）のユニットテスト
"""

import numpy as np
import pytest

from src.encoders.camera import (
    GEOMETRY_CACHE_SIZE,
    CameraBackboneStub,
    CameraModel,
    CameraModelError,
    DepthBinConfig,
    FrustumGeometry,
    KanvTransform,
    LiftError,
    frustum_geometry,
    lift_splat,
)
from src.encoders.pillars import (
    DECORATION_DIM,
    PillarError,
    PillarGridConfig,
    PointCloud,
    pillar_gather,
    pillar_scatter,
    pillarize,
)
from src.encoders.point_encoder import PointEncoder, PointEncoderError, point_encoder_forward
from src.tensor import ops
from src.tensor.tensor import Tensor


@pytest.fixture
def small_bev():
    """16m × 16m、セル 2m の BEV"""
    return PillarGridConfig(x_min=0.0, x_max=16.0, y_min=-8.0, y_max=8.0, cell_size=2.0,
                            max_pillars=64, max_points_per_pillar=8)


def random_cloud(rng, count, bev):
    xs = rng.uniform(bev.x_min, bev.x_max, size=count)
    ys = rng.uniform(bev.y_min, bev.y_max, size=count)
    zs = rng.uniform(0.0, 2.0, size=count)
    return PointCloud(np.stack([xs, ys, zs, rng.uniform(0, 1, size=count)], axis=1))


class TestPillarize:
    """ピラー化"""

    def test_empty_cloud(self, small_bev):
        """空の点群はピラー 0 個になること"""
        grid = pillarize(PointCloud(), small_bev)
        assert grid.num_pillars == 0
        assert grid.pillars.shape == (0, small_bev.max_points_per_pillar, DECORATION_DIM)

    def test_single_point_at_cell_center(self, small_bev):
        """セル中心の1点は中心・平均からのオフセットがすべて 0 になること"""
        grid = pillarize(PointCloud([[3.0, -1.0, 0.5, 0.25]]), small_bev)
        assert grid.num_pillars == 1
        np.testing.assert_array_equal(grid.coords[0], [1, 3])
        np.testing.assert_array_equal(grid.pillars[0, 0, 4:9], np.zeros(5))
        np.testing.assert_allclose(grid.pillars[0, 0, :4], [3.0, -1.0, 0.5, 0.25])
        assert grid.counts[0] == 1

    def test_points_outside_extent_dropped(self, small_bev):
        """BEV 範囲外の点は捨てられること"""
        cloud = PointCloud([[-1.0, 0.0, 0.0, 0.0], [16.0, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0]])
        assert pillarize(cloud, small_bev).num_pillars == 1

    def test_caps_respected(self, rng):
        """ピラー数・ピラー内点数の上限を守ること"""
        bev = PillarGridConfig(x_min=0.0, x_max=8.0, y_min=0.0, y_max=8.0, cell_size=2.0,
                               max_pillars=3, max_points_per_pillar=4)
        grid = pillarize(random_cloud(rng, 200, bev), bev)
        assert grid.num_pillars == 3
        assert np.all(grid.counts <= 4)
        assert np.unique(grid.coords, axis=0).shape[0] == 3

    def test_order_invariant(self, rng, small_bev):
        """点の入力順に依存しないこと"""
        cloud = random_cloud(rng, 120, small_bev)
        shuffled = PointCloud(cloud.points[rng.permutation(len(cloud))])
        a, b = pillarize(cloud, small_bev), pillarize(shuffled, small_bev)
        np.testing.assert_array_equal(a.pillars, b.pillars)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_non_finite_rejected(self):
        """有限でない座標はエラーになること"""
        with pytest.raises(PillarError):
            PointCloud([[np.nan, 0.0, 0.0, 0.0]])

    def test_indivisible_extent_rejected(self):
        """セルサイズで割り切れない範囲はエラーになること"""
        with pytest.raises(PillarError):
            PillarGridConfig(x_min=0.0, x_max=10.0, cell_size=3.0)


class TestScatterGather:
    """散布と収集"""

    def test_scatter_then_gather_round_trip(self, rng):
        """散布したピラー特徴を収集すると元に戻ること"""
        coords = np.array([[0, 0], [3, 1], [2, 2]])
        features = rng.normal(size=(3, 5))
        bev = pillar_scatter(Tensor(features), coords, height=3, width=4)
        assert bev.shape == (1, 5, 3, 4)
        np.testing.assert_array_equal(pillar_gather(bev, coords).data, features)
        assert np.count_nonzero(bev.data.sum(axis=1)) <= 3

    def test_duplicate_coords_rejected(self, rng):
        """座標の重複はエラーになること"""
        with pytest.raises(PillarError):
            pillar_scatter(Tensor(rng.normal(size=(2, 1))), np.array([[1, 1], [1, 1]]), 2, 2)

    def test_out_of_grid_rejected(self, rng):
        """範囲外座標はエラーになること"""
        with pytest.raises(PillarError):
            pillar_scatter(Tensor(rng.normal(size=(1, 1))), np.array([[2, 0]]), 2, 2)


class TestPointEncoder:
    """PointEncoder"""

    @pytest.mark.parametrize('use_kan', [True, False])
    def test_output_shape(self, rng, small_bev, use_kan):
        """出力が (b, c, h, w) になること"""
        encoder = PointEncoder(pillar_channels=6, out_channels=4, use_kan=use_kan, rng=rng)
        grids = [pillarize(random_cloud(rng, 40, small_bev), small_bev) for _ in range(2)]
        out = point_encoder_forward(grids, encoder)
        assert out.shape == (2, 4, small_bev.height, small_bev.width)

    def test_empty_batch_gives_zeros(self, rng, small_bev):
        """ピラーが無ければ出力は全て 0 になること"""
        encoder = PointEncoder(pillar_channels=6, out_channels=4, rng=rng)
        out = encoder(pillarize(PointCloud(), small_bev))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4, small_bev.height, small_bev.width)))

    def test_permutation_invariant(self, rng, small_bev):
        """ピラー内の点を並べ替えても出力がビット単位で一致すること"""
        cloud = random_cloud(rng, 60, small_bev)
        grid = pillarize(cloud, small_bev)
        shuffled = pillarize(cloud, small_bev)
        for p in range(shuffled.num_pillars):
            n = shuffled.counts[p]
            shuffled.pillars[p, :n] = shuffled.pillars[p, rng.permutation(n)]
        encoder = PointEncoder(pillar_channels=6, out_channels=4, rng=rng).eval()
        a = encoder(grid).data
        b = encoder(shuffled).data
        np.testing.assert_array_equal(a, b)

    def test_wrong_decoration_dim(self, rng, small_bev):
        """装飾次元が 9 でないとエラーになること"""
        grid = pillarize(random_cloud(rng, 10, small_bev), small_bev)
        grid.pillars = grid.pillars[..., :8]
        with pytest.raises(PointEncoderError):
            PointEncoder(pillar_channels=4, out_channels=4, rng=rng)(grid)

    def test_gradients_reach_kan_parameters(self, rng, small_bev):
        """損失の勾配が KAN パラメータまで届くこと"""
        encoder = PointEncoder(pillar_channels=4, out_channels=3, rng=rng)
        grid = pillarize(random_cloud(rng, 50, small_bev), small_bev)
        out = encoder(grid)
        ops.reduce_sum(out * out).backward()
        assert encoder.pfn1.layer.coeffs.grad is not None
        assert np.abs(encoder.pfn2.layer.w_b.grad).sum() > 0


class TestCameraModel:
    """カメラモデル"""

    def test_project_unproject_round_trip(self, rng):
        """投影と逆投影が往復で一致すること"""
        cam = CameraModel.roadside()
        points = np.stack([rng.uniform(10, 60, 20), rng.uniform(-10, 10, 20), rng.uniform(0, 2, 20)], axis=1)
        uv, depth = cam.project(points)
        np.testing.assert_allclose(cam.unproject(uv, depth), points, atol=1e-9)

    def test_rotation_orthonormal(self):
        """回転行列が正規直交であること"""
        cam = CameraModel.roadside(pitch_deg=20.0)
        np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(cam.center, [0.0, 0.0, 7.0], atol=1e-12)

    def test_dict_round_trip(self):
        """辞書表現から同じカメラが復元されること"""
        cam = CameraModel.roadside(height=5.0, image_size=(32, 48))
        restored = CameraModel.from_dict(cam.to_dict())
        np.testing.assert_array_equal(restored.rotation, cam.rotation)
        assert restored.image_size == (32, 48)

    def test_singular_intrinsic_rejected(self):
        """正則でない内部行列はエラーになること"""
        with pytest.raises(CameraModelError):
            CameraModel(np.zeros((3, 3)), np.eye(3), np.zeros(3))

    def test_depth_bins(self):
        """深度ビン中心が等間隔に並ぶこと"""
        np.testing.assert_allclose(DepthBinConfig(2.0, 10.0, 4).centers(), [3.0, 5.0, 7.0, 9.0])
        with pytest.raises(CameraModelError):
            DepthBinConfig(5.0, 2.0, 4)

    def test_backbone_channel_mismatch(self, rng):
        """バックボーン入力チャネルの不一致はエラーになること"""
        backbone = CameraBackboneStub(in_channels=3, out_channels=4, rng=rng)
        assert backbone(Tensor(rng.normal(size=(1, 3, 16, 16)))).shape == (1, 4, 4, 4)
        with pytest.raises(CameraModelError):
            backbone(Tensor(rng.normal(size=(1, 2, 16, 16))))


class TestLiftSplat:
    """lift/splat"""

    def test_mass_conservation(self, rng, small_bev):
        """有効サンプルの総和が BEV に保存されること"""
        b, d, fh, fw, c = 2, 3, 2, 4, 5
        depth = ops.softmax(Tensor(rng.normal(size=(b, d, fh, fw))), axis=1)
        features = Tensor(rng.normal(size=(b, c, fh, fw)))
        cells = small_bev.height * small_bev.width
        geometries = [FrustumGeometry(rng.integers(0, cells, size=d * fh * fw), (fh, fw)) for _ in range(b)]
        out = lift_splat(depth, features, geometries, small_bev)
        expected = (depth.data[:, :, None] * features.data[:, None]).sum(axis=(1, 3, 4))
        np.testing.assert_allclose(out.data.sum(axis=(2, 3)), expected, rtol=1e-6)

    def test_invalid_samples_dropped(self, rng, small_bev):
        """範囲外（-1）のサンプルは加算されないこと"""
        depth = Tensor(np.ones((1, 1, 1, 2)))
        features = Tensor(np.ones((1, 1, 1, 2)))
        geometry = FrustumGeometry(np.array([5, -1]), (1, 2))
        out = lift_splat(depth, features, [geometry], small_bev)
        assert out.data.sum() == pytest.approx(1.0)
        assert out.data[0, 0].reshape(-1)[5] == pytest.approx(1.0)

    def test_no_ray_hits_bev(self):
        """BEV と交差する光線が無ければエラーになること"""
        cam = CameraModel.roadside(depth=DepthBinConfig(2.0, 10.0, 4))
        far_bev = PillarGridConfig(x_min=100.0, x_max=116.0, y_min=-8.0, y_max=8.0, cell_size=2.0)
        with pytest.raises(LiftError):
            frustum_geometry(cam, (4, 6), far_bev)

    def test_kanv_transform_shape(self, rng, small_bev):
        """KANvtransform の出力が BEV サイズになること"""
        cam = CameraModel.roadside(image_size=(16, 16), focal=8.0, depth=DepthBinConfig(2.0, 30.0, 4))
        transform = KanvTransform(in_channels=3, mid_channels=4, out_channels=5, depth_bins=4, rng=rng)
        bev_map, depth = transform(Tensor(rng.normal(size=(1, 3, 8, 8))), cam, small_bev, return_depth=True)
        assert bev_map.shape == (1, 5, small_bev.height, small_bev.width)
        np.testing.assert_allclose(depth.data.sum(axis=1), np.ones((1, 4, 4)), atol=1e-12)

    def test_geometry_cache_bounded(self, rng, small_bev):
        """カメラが変わり続けてもジオメトリキャッシュは上限を超えないこと"""
        transform = KanvTransform(in_channels=3, mid_channels=4, out_channels=5, depth_bins=4, rng=rng)
        depth = DepthBinConfig(2.0, 30.0, 4)
        first = CameraModel.roadside(height=6.0, image_size=(16, 16), focal=8.0, depth=depth)
        assert transform.geometry(first, (4, 4), small_bev) is transform.geometry(first, (4, 4), small_bev)
        for i in range(GEOMETRY_CACHE_SIZE + 5):
            cam = CameraModel.roadside(height=6.5 + 0.1 * i, image_size=(16, 16), focal=8.0, depth=depth)
            transform.geometry(cam, (4, 4), small_bev)
        assert len(transform._geometry_cache) == GEOMETRY_CACHE_SIZE
        np.testing.assert_array_equal(transform.geometry(first, (4, 4), small_bev).cell_index,
                                      frustum_geometry(first, (4, 4), small_bev).cell_index)

    def test_kanv_transform_channel_mismatch(self, rng, small_bev):
        """入力チャネルの不一致はエラーになること"""
        cam = CameraModel.roadside(image_size=(16, 16), focal=8.0, depth=DepthBinConfig(2.0, 30.0, 4))
        transform = KanvTransform(in_channels=3, mid_channels=4, out_channels=5, depth_bins=4, rng=rng)
        with pytest.raises(LiftError):
            transform(Tensor(rng.normal(size=(1, 2, 8, 8))), cam, small_bev)
